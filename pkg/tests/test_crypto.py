import itertools
import random

import pytest

import oracles
from ivchain.crypto import (
    EmptyLeafSet,
    Hash32,
    IndexOutOfRange,
    LEFT,
    MalformedKey,
    MalformedSignature,
    MerkleTree,
    RIGHT,
    double_sha256,
    keygen,
    merkle_proof,
    merkle_root,
    sign,
    verify,
    verify_quiet,
)


def test_oracle_known_answers():
    # FIPS 180-2 appendix B vectors pin the oracle itself
    assert oracles.sha256(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert oracles.sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    two_block = b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"
    assert oracles.sha256(two_block).hex() == "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1"


@pytest.mark.parametrize("data", [b"", b"abc", b"\x00" * 55, b"\xff" * 56, bytes(range(64)), bytes(range(200))])
def test_double_sha256_matches_oracle(data):
    out = double_sha256(data)
    assert isinstance(out, Hash32) and len(out) == 32
    assert out == oracles.dsha(data)


def test_avalanche_smoke():
    rng = random.Random(7)
    for _ in range(100):
        data = bytearray(rng.randbytes(rng.randrange(1, 80)))
        before = double_sha256(bytes(data))
        bit = rng.randrange(len(data) * 8)
        data[bit // 8] ^= 1 << (bit % 8)
        assert double_sha256(bytes(data)) != before


def test_hash32_hex_round_trip_and_width():
    h = double_sha256(b"x")
    assert Hash32.from_hex(h.hex()) == h
    with pytest.raises(ValueError):
        Hash32(b"short")


def test_merkle_examples():
    a, b, c = b"a", b"b", b"c"
    H = oracles.dsha
    assert merkle_root([a]) == H(a)
    assert merkle_root([a, b]) == H(H(a) + H(b))
    assert merkle_root([a, b, c]) == H(H(H(a) + H(b)) + H(H(c) + H(c)))
    with pytest.raises(EmptyLeafSet):
        merkle_root([])


def test_merkle_levels_and_single_leaf():
    tree = MerkleTree.from_payloads([b"p"])
    assert tree.root == tree.leaves[0] == double_sha256(b"p")
    assert merkle_proof(tree, 0) == []


def test_merkle_proof_examples():
    H = oracles.dsha
    two = MerkleTree.from_payloads([b"a", b"b"])
    assert merkle_proof(two, 0) == [(H(b"b"), RIGHT)]
    three = MerkleTree.from_payloads([b"a", b"b", b"c"])
    proof = merkle_proof(three, 2)
    assert proof == [(H(b"c"), RIGHT), (H(H(b"a") + H(b"b")), LEFT)]
    assert three.root == H(proof[1][0] + H(H(b"c") + proof[0][0]))
    with pytest.raises(IndexOutOfRange):
        merkle_proof(three, 3)
    with pytest.raises(IndexOutOfRange):
        merkle_proof(three, -1)


def test_merkle_root_matches_oracle_up_to_16_leaves():
    rng = random.Random(3)
    for n in range(1, 17):
        payloads = [rng.randbytes(rng.randrange(0, 40)) for _ in range(n)]
        assert merkle_root(payloads) == oracles.merkle_root(payloads)


def test_every_perturbation_of_a_four_leaf_proof_fails():
    from ivchain.crypto import verify_merkle_proof

    tree = MerkleTree.from_payloads([b"w", b"x", b"y", b"z"])
    for i, leaf in enumerate(tree.leaves):
        proof = merkle_proof(tree, i)
        assert verify_merkle_proof(leaf, proof, tree.root)
        for perm in itertools.permutations(proof):
            if list(perm) != proof:
                assert not verify_merkle_proof(leaf, list(perm), tree.root)
        for k in range(len(proof)):
            flipped = list(proof)
            h, side = flipped[k]
            flipped[k] = (h, LEFT if side == RIGHT else RIGHT)
            assert not verify_merkle_proof(leaf, flipped, tree.root)
            assert not verify_merkle_proof(leaf, proof[:k] + proof[k + 1:], tree.root)
        for other in tree.leaves:
            if other != leaf:
                assert not verify_merkle_proof(other, proof, tree.root)


def test_merkle_any_leaf_mutation_changes_root():
    payloads = [b"t0", b"t1", b"t2", b"t3", b"t4"]
    root = merkle_root(payloads)
    for i in range(len(payloads)):
        mutated = list(payloads)
        mutated[i] += b"!"
        assert merkle_root(mutated) != root
    assert merkle_root(payloads[::-1]) != root


def test_keygen_is_deterministic():
    assert keygen("seed") == keygen("seed")
    assert keygen("seed").public != keygen("other").public
    assert keygen(5) == keygen(5)


def test_sign_verify_round_trip():
    k = keygen("alice")
    sig = sign(k.secret, b"hello")
    assert sig == sign(k.secret, b"hello")
    assert verify(k.public, b"hello", sig)
    assert not verify(k.public, b"hello!", sig)
    assert not verify(keygen("bob").public, b"hello", sig)


def test_malformed_inputs_raise():
    k = keygen("alice")
    sig = sign(k.secret, b"m")
    with pytest.raises(MalformedKey):
        verify(k.public[:-1], b"m", sig)
    with pytest.raises(MalformedSignature):
        verify(k.public, b"m", sig + b"\x00")
    with pytest.raises(MalformedKey):
        sign(b"\x01" * 31, b"m")
    assert not verify_quiet(k.public, b"m", sig[:10])


def test_random_signatures_do_not_verify():
    k = keygen("alice")
    rng = random.Random(11)
    assert not any(verify(k.public, b"msg", rng.randbytes(64)) for _ in range(10_000))
