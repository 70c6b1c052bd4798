"""Primitive-layer tests: PKI, DH, signatures, MAC, PRF, PRG."""

import random

import numpy as np
import pytest

from fedmask import crypto
from fedmask.crypto import (
    DhError,
    OperatorPki,
    PkiError,
    dh_generate,
    dh_shared,
    mac,
    mac_verify,
    make_hostname,
    prf,
    prg,
    sign,
    verify,
)


@pytest.fixture
def pki():
    return OperatorPki(root_seed=b"\x07" * 32)


def test_issue_then_verify(pki):
    ident = pki.issue("gNB-00000001.myran.example.com")
    assert ident.hostname == "gNB-00000001.myran.example.com"
    assert pki.verify_certificate(ident.certificate)


def test_issue_duplicate_rejected(pki):
    pki.issue(make_hostname(1))
    with pytest.raises(PkiError):
        pki.issue(make_hostname(1))


def test_issue_duplicate_token_rejected(pki):
    # same 12-byte identifier under a different domain is still a collision
    pki.issue("gNB-00000001.myran.example.com")
    with pytest.raises(PkiError):
        pki.issue("gNB-00000001.other.example.se")


def test_issue_wrong_length_rejected(pki):
    # 29 bytes
    with pytest.raises(PkiError):
        pki.issue("gNB-00000001.myran.example.co")
    # 31 bytes
    with pytest.raises(PkiError):
        pki.issue("gNB-00000001.myran.example.comx")


def test_issue_malformed_rejected(pki):
    with pytest.raises(PkiError):
        pki.issue("eNB-00000001.myran.example.com")
    with pytest.raises(PkiError):
        pki.issue("gNB-0000000g.myran.example.com")


def test_lookup_after_issue(pki):
    ident = pki.issue(make_hostname(2))
    assert pki.lookup(ident.hostname) == ident.certificate


def test_lookup_unknown(pki):
    with pytest.raises(PkiError):
        pki.lookup(make_hostname(99))


def test_lookup_is_read_only(pki):
    ident = pki.issue(make_hostname(3))
    a = pki.lookup(ident.hostname)
    b = pki.lookup(ident.hostname)
    assert a == b and a.public_key == b.public_key and a.signature == b.signature


def test_certificate_store_round_trip(tmp_path, pki):
    for i in range(4):
        pki.issue(make_hostname(i))
    path = tmp_path / "certs.json"
    pki.export_certificates(str(path))
    other = OperatorPki(root_seed=b"\x07" * 32)
    assert other.import_certificates(str(path)) == 4
    assert other.hostnames() == pki.hostnames()
    assert other.lookup(make_hostname(2)) == pki.lookup(make_hostname(2))


def test_dh_both_sides_equal():
    a = dh_generate()
    b = dh_generate()
    assert dh_shared(a.private, b.public) == dh_shared(b.private, a.public)


def test_dh_invalid_point_rejected():
    a = dh_generate()
    with pytest.raises(DhError):
        dh_shared(a.private, b"\x00" * 31)
    # the all-zero encoding is a low-order element
    with pytest.raises(DhError):
        dh_shared(a.private, b"\x00" * 32)


def test_dh_secrets_distinct_over_1000_pairs():
    rng = random.Random(1234)
    base = dh_generate(seed=rng.randbytes(32))
    secrets = set()
    for _ in range(1000):
        other = dh_generate(seed=rng.randbytes(32))
        secrets.add(dh_shared(base.private, other.public))
    assert len(secrets) == 1000


def test_sign_verify_accepts(pki):
    ident = pki.issue(make_hostname(1))
    sig = sign(ident.signing_key, b"round transcript")
    assert len(sig) == 64
    assert verify(ident.certificate, b"round transcript", sig)


def test_sign_verify_rejects_flipped_bit(pki):
    ident = pki.issue(make_hostname(1))
    msg = b"round transcript"
    sig = sign(ident.signing_key, msg)
    bad_msg = bytes([msg[0] ^ 0x01]) + msg[1:]
    assert not verify(ident.certificate, bad_msg, sig)
    bad_sig = bytes([sig[0] ^ 0x01]) + sig[1:]
    assert not verify(ident.certificate, msg, bad_sig)


def test_sign_verify_rejects_wrong_certificate(pki):
    ident = pki.issue(make_hostname(1))
    other = pki.issue(make_hostname(2))
    sig = sign(ident.signing_key, b"m")
    assert not verify(other.certificate, b"m", sig)


def test_signature_soundness_randomized(pki):
    # any single-bit flip in message or signature must reject
    ident = pki.issue(make_hostname(1))
    rng = random.Random(99)
    for _ in range(1000):
        msg = rng.randbytes(rng.randint(1, 64))
        sig = sign(ident.signing_key, msg)
        if rng.random() < 0.5:
            i = rng.randrange(len(msg) * 8)
            tampered = bytearray(msg)
            tampered[i // 8] ^= 1 << (i % 8)
            assert not verify(ident.certificate, bytes(tampered), sig)
        else:
            i = rng.randrange(len(sig) * 8)
            tampered = bytearray(sig)
            tampered[i // 8] ^= 1 << (i % 8)
            assert not verify(ident.certificate, msg, bytes(tampered))


def test_mac_round_trip():
    key = b"\x11" * 16
    tag = mac(key, b"gNB-00000001.myran.example.com")
    assert len(tag) == 16
    assert mac_verify(key, b"gNB-00000001.myran.example.com", tag)


def test_mac_rejects_wrong_key_and_message():
    key = b"\x11" * 16
    tag = mac(key, b"hello")
    assert not mac_verify(b"\x22" * 16, b"hello", tag)
    assert not mac_verify(key, b"hellO", tag)


def test_mac_soundness_randomized():
    rng = random.Random(7)
    for _ in range(1000):
        key = rng.randbytes(16)
        msg = rng.randbytes(rng.randint(1, 48))
        tag = mac(key, msg)
        i = rng.randrange(len(msg) * 8)
        tampered = bytearray(msg)
        tampered[i // 8] ^= 1 << (i % 8)
        assert not mac_verify(key, bytes(tampered), tag)


def test_prf_deterministic():
    s = b"\x01" * 32
    assert prf(s, b"mask", b"round=0") == prf(s, b"mask", b"round=0")


def test_prf_context_separation():
    s = b"\x01" * 32
    assert prf(s, b"mask", b"round=0") != prf(s, b"mask", b"round=1")
    assert prf(s, b"mask", b"") != prf(s, b"seed", b"")


def test_prf_label_framing_blocks_concatenation_collisions():
    s = b"\x02" * 32
    assert prf(s, b"ab", b"c") != prf(s, b"a", b"bc")


def test_prf_domain_separation_exhaustive_small_contexts():
    s = b"\x03" * 32
    outputs = set()
    for label in (b"a", b"b", b"mask"):
        for ctx in range(32):
            outputs.add(prf(s, label, bytes([ctx])))
    assert len(outputs) == 3 * 32


def test_prf_bit_balance():
    # counting oracle: over 1e4 evaluations the bit frequency sits within 1% of 50%
    s = b"\x05" * 32
    blob = b"".join(prf(s, b"balance", i.to_bytes(4, "big")) for i in range(10_000))
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8))
    assert abs(bits.mean() - 0.5) < 0.01


def test_prg_zero_length():
    assert prg(b"\x04" * 32, 0) == b""


def test_prg_deterministic():
    assert prg(b"\x04" * 32, 33) == prg(b"\x04" * 32, 33)
    assert prg(b"\x04" * 32, 33) != prg(b"\x05" * 32, 33)


def test_prg_prefix_property():
    seed = b"\x06" * 32
    assert prg(seed, 64)[:16] == prg(seed, 16)


def test_hostname_generator_sizes():
    for i in (0, 1, 0xFFFFFFFF):
        name = make_hostname(i)
        assert len(name.encode()) == 30
