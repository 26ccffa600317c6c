import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slimdenoise import data as D
from slimdenoise.metrics import psnr_per_image
from slimdenoise.slimnet import BackboneSpec


# ---------------------------------------------------------------------------
# synthetic data


def test_zero_sigma_is_clean():
    ds = D.synth_dataset(0, 6, patch_size=16, sigma_range=(0.0, 0.0))
    assert np.array_equal(ds.noisy, ds.clean)


def test_same_seed_bitwise_identical():
    a, b = D.synth_dataset(7, 5), D.synth_dataset(7, 5)
    assert np.array_equal(a.clean, b.clean) and np.array_equal(a.noisy, b.noisy)
    assert not np.array_equal(a.clean, D.synth_dataset(8, 5).clean)


def test_patch_depends_only_on_seed_and_index():
    assert np.array_equal(D.synth_dataset(3, 10).noisy[:4], D.synth_dataset(3, 4).noisy)


def test_values_clipped_and_shapes():
    ds = D.synth_dataset(1, 8, patch_size=24)
    assert ds.clean.shape == ds.noisy.shape == (8, 1, 24, 24)
    assert ds.noisy.min() >= 0 and ds.noisy.max() <= 1
    assert ds.clean.min() >= 0 and ds.clean.max() <= 1
    lo, hi = 10 / 255, 50 / 255
    assert np.all((ds.sigma >= lo) & (ds.sigma <= hi))
    pair = ds[3]
    assert pair.clean.shape == (1, 1, 24, 24) and pair.sigma == ds.sigma[3]


def simulated_psnr(sigma, clean, draws=64, seed=0):
    """Expected PSNR of clipped Gaussian noise on given clean patches by direct simulation."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(draws):
        noisy = np.clip(clean + rng.normal(0, sigma, clean.shape), 0, 1)
        vals.append(psnr_per_image(noisy, clean))
    return float(np.mean(vals))


def test_sigma_25_psnr():
    s = 25 / 255
    ds = D.synth_dataset(11, 256, patch_size=32, sigma_range=(s, s))
    measured = float(psnr_per_image(ds.noisy, ds.clean).mean())
    assert measured == pytest.approx(20.17, abs=0.3)
    assert measured == pytest.approx(simulated_psnr(s, ds.clean.astype(np.float64), draws=4), abs=0.1)


@pytest.mark.parametrize("kw", [dict(count=0), dict(count=2, sigma_range=(0.2, 0.1)),
                                dict(count=2, sigma_range=(-0.1, 0.1))])
def test_invalid_dataset_args(kw):
    with pytest.raises(ValueError):
        D.synth_dataset(0, **kw)


# ---------------------------------------------------------------------------
# PGM


def test_pgm_zero_round_trip(tmp_path):
    D.save_pgm(tmp_path / "z.pgm", np.zeros((1, 1, 5, 7), np.float32))
    img = D.load_pgm(tmp_path / "z.pgm")
    assert img.shape == (1, 1, 5, 7) and not img.any()


def test_pgm_known_values(tmp_path):
    p = tmp_path / "k.pgm"
    p.write_bytes(b"P5\n# comment\n2 2\n255\n" + bytes([0, 85, 170, 255]))
    np.testing.assert_allclose(D.load_pgm(p).ravel(), [0, 1 / 3, 2 / 3, 1], atol=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 20), st.integers(1, 20))
def test_pgm_round_trip_error(tmp_path_factory, seed, h, w):
    x = np.random.default_rng(seed).uniform(-0.2, 1.2, (1, 1, h, w)).astype(np.float32)
    p = tmp_path_factory.mktemp("pgm") / "r.pgm"
    D.save_pgm(p, x)
    assert np.max(np.abs(D.load_pgm(p) - np.clip(x, 0, 1))) <= 1 / 510 + 1e-7


@pytest.mark.parametrize("payload", [b"P2\n2 2\n255\n0 0 0 0", b"P5\n2 2\n65535\n" + bytes(8),
                                     b"P5\n2 2\n255\n" + bytes(3), b"P5\n2\n", b""])
def test_pgm_malformed(tmp_path, payload):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(D.PGMError):
        D.load_pgm(p)


# ---------------------------------------------------------------------------
# checkpoints


def test_fnv_reference_vectors():
    assert D.fnv1a64(b"") == 0xCBF29CE484222325
    assert D.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert D.fnv1a64(b"foobar") == 0x85944171F73967E8


def sample_checkpoint(seed=0):
    rng = np.random.default_rng(seed)
    spec = BackboneSpec(depth=3, base_width=16)
    tensors = {"backbone": {"conv0.weight": rng.standard_normal((24, 1, 3, 3)).astype(np.float32),
                            "conv0.bias": np.array([np.nan, -0.0, np.inf, 1e-40], np.float32),
                            "scalar": np.array(3.5, np.float32)},
               "adam": {"m.conv0.weight": rng.standard_normal((2, 3)).astype(np.float32)}}
    meta = {"spec": spec.to_dict(), "routing": {"entries": [[24, 24], [8, 8]], "log": [1]}}
    return D.Checkpoint(D.spec_digest(spec), tensors, json.loads(json.dumps(meta))), spec


def test_checkpoint_round_trip_bitwise(tmp_path):
    ckpt, spec = sample_checkpoint()
    p = tmp_path / "a.ckpt"
    D.save_checkpoint(p, ckpt)
    back = D.load_checkpoint(p, D.spec_digest(spec))
    assert back.meta == ckpt.meta and back.spec_digest == ckpt.spec_digest
    for sec, table in ckpt.tensors.items():
        for name, arr in table.items():
            got = back.tensors[sec][name]
            assert got.shape == arr.shape and got.tobytes() == arr.tobytes()
    D.save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "b.ckpt").read_bytes() == p.read_bytes()


def test_partial_checkpoint(tmp_path):
    ckpt = D.Checkpoint(1, {"backbone": {"w": np.ones(2, np.float32)}})
    D.save_checkpoint(tmp_path / "p.ckpt", ckpt)
    back = D.load_checkpoint(tmp_path / "p.ckpt")
    assert back.has("backbone") and not back.has("gate")


@pytest.fixture
def saved(tmp_path):
    ckpt, spec = sample_checkpoint()
    p = tmp_path / "c.ckpt"
    D.save_checkpoint(p, ckpt)
    return p, spec


def test_bad_magic(saved):
    p, _ = saved
    buf = bytearray(p.read_bytes())
    buf[0] ^= 0xFF
    p.write_bytes(bytes(buf))
    with pytest.raises(D.CheckpointFormatError):
        D.load_checkpoint(p)


def test_version_mismatch(saved):
    p, _ = saved
    buf = bytearray(p.read_bytes())
    buf[8:12] = struct.pack("<I", D.FORMAT_VERSION + 1)
    p.write_bytes(bytes(buf))
    with pytest.raises(D.CheckpointVersionError):
        D.load_checkpoint(p)


def test_payload_byte_flip_is_digest_error(saved):
    p, _ = saved
    buf = bytearray(p.read_bytes())
    for pos in (len(buf) - 5, len(buf) // 2):
        corrupt = bytearray(buf)
        corrupt[pos] ^= 0x01
        p.write_bytes(bytes(corrupt))
        with pytest.raises(D.CheckpointError) as err:
            D.load_checkpoint(p)
        assert type(err.value) in (D.CheckpointDigestError, D.CheckpointFormatError, D.CheckpointTruncatedError)
    # a flip well inside the first tensor payload is a digest error
    corrupt = bytearray(buf)
    corrupt[buf.index(b"conv0.weight") + 40] ^= 0x01
    p.write_bytes(bytes(corrupt))
    with pytest.raises(D.CheckpointDigestError):
        D.load_checkpoint(p)


def test_truncation(saved):
    p, _ = saved
    buf = p.read_bytes()
    for cut in (4, 20, len(buf) // 2, len(buf) - 1):
        p.write_bytes(buf[:cut])
        with pytest.raises((D.CheckpointTruncatedError, D.CheckpointFormatError)):
            D.load_checkpoint(p)
    p.write_bytes(buf[:len(buf) - 1])
    with pytest.raises(D.CheckpointTruncatedError):
        D.load_checkpoint(p)


def test_spec_digest_mismatch(saved):
    p, _ = saved
    with pytest.raises(D.CheckpointDigestError):
        D.load_checkpoint(p, D.spec_digest(BackboneSpec()))


def test_error_classes_are_distinct():
    classes = {D.CheckpointFormatError, D.CheckpointVersionError, D.CheckpointDigestError,
               D.CheckpointTruncatedError}
    assert len(classes) == 4
    assert all(issubclass(c, D.CheckpointError) for c in classes)
    assert not any(issubclass(a, b) for a in classes for b in classes if a is not b)
