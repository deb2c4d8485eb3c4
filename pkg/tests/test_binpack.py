import numpy as np
import pytest

import binpack
import data
import objectives
import sae
from binpack import BinningParams, PackedMatrix
from errors import (
    BadMagicError,
    ContractError,
    IndexOutOfRangeError,
    PayloadError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

GOLDEN = (
    b"MOSU" + bytes([1]) + bytes([1, 0, 0, 0])
    + bytes([2, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0])
    + bytes(8)
    + bytes([0, 0, 0, 0, 0, 0, 0xE8, 0x3F])
    + bytes([0x1B])
)


# ---------- codec ----------
def test_bin_arithmetic() -> None:
    p = binpack.bin_encode(np.array([[0.0, 0.6, 1.0]]), 4)
    assert p.params == BinningParams(0.0, 0.25, 4)
    assert p.indices.tolist() == [0, 2, 3]
    assert binpack.bin_decode(p).tolist() == [[0.125, 0.625, 0.875]]


def test_constant_matrix_has_zero_step() -> None:
    p = binpack.bin_encode(np.full((2, 3), -1.5), 16)
    assert p.params.step == 0.0
    assert not p.indices.any()
    assert np.array_equal(binpack.bin_decode(p), np.full((2, 3), -1.5))


def test_density_validation() -> None:
    for bad in (1, 0, 2.5):
        with pytest.raises(ContractError):
            binpack.bin_encode(np.eye(2), bad)


def test_index_bits() -> None:
    assert [binpack.index_bits(d) for d in (2, 3, 4, 5, 100, 256, 1024)] == [1, 2, 2, 3, 7, 8, 10]


@pytest.mark.parametrize("density", [2, 16, 100, 1024])
def test_reconstruction_within_half_step(density) -> None:
    rng = np.random.default_rng(density)
    for _ in range(20):
        m = rng.normal(0.0, rng.uniform(0.01, 10.0), size=tuple(rng.integers(1, 12, size=2)))
        p = binpack.bin_encode(m, density)
        err = np.max(np.abs(binpack.bin_decode(p) - m))
        assert err <= p.params.step / 2 * (1 + 1e-9) + 1e-12


@pytest.mark.slow
def test_reconstruction_bound_many_matrices() -> None:
    rng = np.random.default_rng(2024)
    for i in range(1000):
        density = (2, 16, 100, 1024)[i % 4]
        m = rng.uniform(-5.0, 5.0, size=tuple(rng.integers(1, 20, size=2)))
        p = binpack.bin_encode(m, density)
        assert np.max(np.abs(binpack.bin_decode(p) - m)) <= p.params.step / 2 * (1 + 1e-9) + 1e-12


# ---------- compression rate ----------
def test_compression_rate_examples() -> None:
    assert binpack.compression_rate(256, 1000) == pytest.approx(0.127)
    assert binpack.compression_rate(2, 64) == pytest.approx(0.046875)
    with pytest.raises(ContractError):
        binpack.compression_rate(2, 0)


def test_compression_rate_at_density_100() -> None:
    for n in (10_000, 100_000, 10_000_000):
        assert 0.10 <= binpack.compression_rate(100, n) <= 0.12


# ---------- wire format ----------
def test_golden_payload() -> None:
    p = binpack.bin_encode(np.array([[0.0, 1.0], [2.0, 3.0]]), 4)
    blob = binpack.pack_payload([p])
    assert blob == GOLDEN
    assert binpack.unpack_payload(blob) == [p]


def test_single_entry_size() -> None:
    p = binpack.bin_encode(np.array([[0.5]]), 2)
    assert len(binpack.pack_payload([p])) == 38


def test_payload_round_trip() -> None:
    rng = np.random.default_rng(5)
    packed = [binpack.bin_encode(rng.normal(size=(int(r), int(c))), int(d))
              for r, c, d in zip(rng.integers(1, 9, 6), rng.integers(1, 9, 6), rng.integers(2, 2000, 6))]
    assert binpack.unpack_payload(binpack.pack_payload(packed)) == packed


def test_truncated_payload() -> None:
    with pytest.raises(TruncatedPayloadError):
        binpack.unpack_payload(GOLDEN[:-1])
    with pytest.raises(TruncatedPayloadError):
        binpack.unpack_payload(GOLDEN[:6])


def test_bad_magic() -> None:
    with pytest.raises(BadMagicError):
        binpack.unpack_payload(b"MOSX" + GOLDEN[4:])
    with pytest.raises(BadMagicError):
        binpack.unpack_payload(b"MO")


def test_unsupported_version() -> None:
    with pytest.raises(UnsupportedVersionError):
        binpack.unpack_payload(GOLDEN[:4] + bytes([2]) + GOLDEN[5:])


def test_index_out_of_range() -> None:
    bad = PackedMatrix(1, 1, BinningParams(0.0, 1.0, 3), np.array([3], dtype=np.uint32))
    with pytest.raises(IndexOutOfRangeError):
        binpack.unpack_payload(binpack.pack_payload([bad]))
    with pytest.raises(IndexOutOfRangeError):
        binpack.bin_decode(bad)


def test_trailing_bytes() -> None:
    with pytest.raises(PayloadError):
        binpack.unpack_payload(GOLDEN + b"\x00")


# ---------- whole models ----------
def test_model_round_trip_within_half_step(small_model) -> None:
    packed = binpack.pack_model(small_model, 100)
    back = binpack.unpack_model(packed, small_model.config)
    assert back.widths == small_model.widths
    for p, (_, a), (_, b) in zip(packed, small_model.named_matrices(), back.named_matrices()):
        assert a.shape == b.shape
        assert np.max(np.abs(a - b)) <= p.params.step / 2 * (1 + 1e-9) + 1e-12


def test_payload_report(small_model) -> None:
    packed = binpack.pack_model(small_model, 100)
    blob = binpack.pack_payload(packed)
    r = binpack.payload_report(packed, len(blob))
    assert r["parameters"] == small_model.parameter_count()
    assert r["matrices"] == len(small_model.named_matrices())
    assert r["bits_per_index"] == 7
    assert r["wire_ratio"] == pytest.approx(len(blob) / (8 * r["parameters"]))
    assert r["reference_rates"]["reported_at_density_100"] == 0.1108


# ---------- error bound ----------
def test_bound_on_identity() -> None:
    r = binpack.verify_error_bound(np.eye(3), 4, np.array([1.0, -2.0, 0.5]))
    assert r.cond == pytest.approx(1.0)
    assert r.holds


@pytest.mark.parametrize("density", [2, 16, 100, 1024])
def test_bound_on_random_matrices(density) -> None:
    rng = np.random.default_rng(density + 1)
    for _ in range(25):
        a = binpack.random_well_conditioned(6, rng)
        r = binpack.verify_error_bound(a, density, rng.uniform(-1.0, 1.0, size=6))
        assert r.holds, r
        assert r.holds == (r.lhs <= r.cond + 1e-9)


def test_bound_preconditions() -> None:
    with pytest.raises(ContractError):
        binpack.verify_error_bound(np.full((2, 2), 3.0), 4, np.ones(2))
    with pytest.raises(ContractError):
        binpack.verify_error_bound(np.ones((2, 3)), 4, np.ones(2))


@pytest.mark.slow
def test_bound_holds_on_many_instances() -> None:
    rng = np.random.default_rng([0, 15])
    for i in range(1000):
        density = (2, 16, 100, 1024)[i % 4]
        r = binpack.verify_error_bound(binpack.random_well_conditioned(6, rng), density, rng.standard_normal(6))
        assert r.holds, (i, r)


def test_fine_binning_keeps_detection_quality(trained_model, fixture_splits) -> None:
    normals = data.normals(fixture_splits.calib)
    d = fixture_splits.eval

    def f1(model):
        thr = sae.calibrate_final_threshold(model, normals, 0.99)
        return objectives.f1_score(objectives.confusion(d.labels, sae.classify(model, d, thr)))

    packed = binpack.unpack_payload(binpack.pack_payload(binpack.pack_model(trained_model, 256)))
    decoded = binpack.unpack_model(packed, trained_model.config)
    assert abs(f1(decoded) - f1(trained_model)) <= 0.05
