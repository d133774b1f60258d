"""Checkpoint container: byte format, integrity checks, compatibility."""

import json
import struct
import zlib

import numpy as np
import pytest

from vardepth.checkpoint import (
    CORE_FIELDS,
    FORMAT_VERSION,
    KINDS,
    MAGIC,
    CheckpointData,
    check_compatible,
    core_signature,
    expect_kind,
    load_checkpoint,
    load_into,
    save_checkpoint,
    save_model,
)
from vardepth.errors import CompatibilityError, IOFormatError
from vardepth.tokenizer import MsvqTokenizer, TokenizerConfig

CONFIG = {"model": {"vocab_size": 32, "channels": 4, "n_scales": 3,
                    "schedule": [[1, 1], [2, 2], [2, 3]]}}


def small_params(rng):
    return {
        "w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5).astype(np.float32),
        "grid": rng.standard_normal((2, 3, 2)).astype(np.float32),
    }


# -- round trip -------------------------------------------------------------------


def test_save_load_round_trip_is_bit_exact(tmp_path, rng):
    path = tmp_path / "m.vard"
    params = small_params(rng)
    save_checkpoint(path, "prior", CONFIG, params)
    ck = load_checkpoint(path)
    assert ck.kind == "prior"
    assert ck.version == FORMAT_VERSION
    assert ck.config == json.loads(json.dumps(CONFIG))
    assert set(ck.params) == set(params)
    for name, arr in params.items():
        assert ck.params[name].dtype == np.float32
        np.testing.assert_array_equal(ck.params[name], arr)


def test_file_leads_with_the_magic_and_ends_with_a_crc(tmp_path, rng):
    path = tmp_path / "m.vard"
    save_checkpoint(path, "upsampler", CONFIG, small_params(rng))
    blob = path.read_bytes()
    assert blob[:4] == MAGIC == b"VARD"
    body, crc = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    assert zlib.crc32(body) & 0xFFFFFFFF == crc
    assert struct.unpack("<I", body[:4])[0] == FORMAT_VERSION


def test_rewriting_identical_content_is_byte_identical(tmp_path, rng):
    params = small_params(rng)
    p1, p2 = tmp_path / "a.vard", tmp_path / "b.vard"
    save_checkpoint(p1, "prior", CONFIG, params)
    save_checkpoint(p2, "prior", CONFIG, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_no_tmp_file_remains_after_save(tmp_path, rng):
    path = tmp_path / "m.vard"
    save_checkpoint(path, "prior", CONFIG, small_params(rng))
    assert [p.name for p in tmp_path.iterdir()] == ["m.vard"]


# -- corruption ---------------------------------------------------------------------


def test_loader_rejects_corrupted_files(tmp_path, rng):
    path = tmp_path / "m.vard"
    save_checkpoint(path, "prior", CONFIG, small_params(rng))
    blob = bytearray(path.read_bytes())

    wrong_magic = tmp_path / "magic.vard"
    wrong_magic.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(IOFormatError, match="not a VARD checkpoint"):
        load_checkpoint(wrong_magic)

    flipped = bytearray(blob)
    flipped[30] ^= 0xFF
    bad_crc = tmp_path / "crc.vard"
    bad_crc.write_bytes(bytes(flipped))
    with pytest.raises(IOFormatError, match="checksum mismatch"):
        load_checkpoint(bad_crc)

    stub = tmp_path / "stub.vard"
    stub.write_bytes(b"VARD\x01")
    with pytest.raises(IOFormatError, match="truncated"):
        load_checkpoint(stub)

    # junk appended inside the checksummed region -> trailing-bytes error
    payload = bytes(blob[4:-4]) + b"JUNKJUNK"
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    padded = tmp_path / "trail.vard"
    padded.write_bytes(b"VARD" + payload + crc)
    with pytest.raises(IOFormatError, match="trailing bytes"):
        load_checkpoint(padded)


def test_loader_rejects_future_versions_and_unknown_kinds(tmp_path, rng):
    path = tmp_path / "m.vard"
    save_checkpoint(path, "prior", CONFIG, small_params(rng))
    blob = bytearray(path.read_bytes())

    body = bytearray(blob[4:-4])
    struct.pack_into("<I", body, 0, 99)
    crc = struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    future = tmp_path / "future.vard"
    future.write_bytes(b"VARD" + bytes(body) + crc)
    with pytest.raises(IOFormatError, match="unsupported format version"):
        load_checkpoint(future)

    with pytest.raises(CompatibilityError, match="unknown model kind"):
        save_checkpoint(tmp_path / "x.vard", "discriminator", CONFIG, {})


# -- compatibility --------------------------------------------------------------------


def make_ckpt(kind="prior", **model_overrides):
    model = dict(CONFIG["model"])
    model.update(model_overrides)
    return CheckpointData(kind=kind, version=1, config={"model": model}, params={})


def test_core_signature_reads_the_model_section():
    sig = core_signature(CONFIG)
    assert set(sig) == set(CORE_FIELDS)
    assert sig["schedule"] == ((1, 1), (2, 2), (2, 3))  # canonicalized to tuples
    flat = core_signature(CONFIG["model"])  # also accepts a bare model dict
    assert flat == sig
    with pytest.raises(CompatibilityError, match="lacks 'channels'"):
        core_signature({"model": {"vocab_size": 1}})


def test_compatibility_accepts_equal_cores_in_any_container_shape():
    a = make_ckpt("tokenizer-depth")
    b = make_ckpt("prior")
    listy = CheckpointData(kind="upsampler", version=1, params={},
                           config={"model": dict(CONFIG["model"],
                                                 schedule=((1, 1), (2, 2), (2, 3)))})
    check_compatible(a, b, listy)  # tuples vs lists must not matter
    check_compatible(a)  # single argument is trivially fine


def test_compatibility_names_every_divergent_field():
    a = make_ckpt("tokenizer-depth")
    b = make_ckpt("prior", vocab_size=64, n_scales=4,
                  schedule=[[1, 1], [2, 2], [2, 3], [4, 4]])
    with pytest.raises(CompatibilityError) as err:
        check_compatible(a, b)
    msg = str(err.value)
    assert "vocab_size: tokenizer-depth=32 vs prior=64" in msg
    assert "n_scales" in msg and "schedule" in msg
    assert "channels" not in msg


def test_expect_kind():
    ck = make_ckpt("prior")
    assert expect_kind(ck, "prior") is ck
    with pytest.raises(CompatibilityError, match="'prior' where 'upsampler'"):
        expect_kind(ck, "upsampler")


# -- model persistence ------------------------------------------------------------------


def test_model_state_survives_save_and_load(tmp_path):
    cfg = TokenizerConfig(vocab_size=16, latent_channels=4,
                          schedule=((1, 1), (2, 2)))
    src = MsvqTokenizer(np.random.default_rng(0), cfg)
    dst = MsvqTokenizer(np.random.default_rng(99), cfg)
    path = tmp_path / "tok.vard"
    save_model(path, "tokenizer-depth", src, CONFIG)
    before = {k: v.copy() for k, v in src.state_dict().items()}
    ck = load_into(path, "tokenizer-depth", dst)
    assert ck.kind == "tokenizer-depth"
    for name, arr in dst.state_dict().items():
        np.testing.assert_array_equal(arr, before[name])
    with pytest.raises(CompatibilityError):
        load_into(path, "tokenizer-rgb", dst)


def test_known_kinds_are_the_four_pipeline_stages():
    assert KINDS == ("tokenizer-depth", "tokenizer-rgb", "prior", "upsampler")
