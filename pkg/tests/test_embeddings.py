import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedfusion.embeddings import (
    EMB_MAGIC,
    EmbeddingDataset,
    PromptBank,
    load_embeddings,
    load_prompt_bank,
    normalize,
    save_embeddings,
    save_prompt_bank,
)
from fedfusion.errors import (
    DegenerateInputError,
    FormatError,
    TruncationError,
    ValidationError,
)


def make_ds(vectors, labels, c, normalized=False):
    return EmbeddingDataset(np.asarray(vectors, dtype=float),
                            np.asarray(labels, dtype=np.int64), c,
                            normalized=normalized)


def test_minimal_file_roundtrip(tmp_path):
    ds = make_ds([[1.0, 0.0]], [0], 1, normalized=True)
    path = tmp_path / "one.tfe"
    save_embeddings(ds, path)
    back = load_embeddings(path)
    assert back.dim == 2 and back.num_samples == 1 and back.num_classes == 1
    assert back.normalized
    np.testing.assert_array_equal(back.vectors, [[1.0, 0.0]])


def test_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    vectors = rng.standard_normal((17, 5)).astype(np.float32).astype(np.float64)
    ds = make_ds(vectors, rng.integers(0, 3, 17), 3)
    path = tmp_path / "rt.tfe"
    save_embeddings(ds, path)
    back = load_embeddings(path)
    # float32 on disk: bit-exact because the input was float32-representable
    assert (back.vectors == ds.vectors).all()
    assert (back.labels == ds.labels).all()
    save_embeddings(back, tmp_path / "rt2.tfe")
    assert (tmp_path / "rt.tfe").read_bytes() == (tmp_path / "rt2.tfe").read_bytes()


def test_truncated_payload_rejected(tmp_path):
    ds = make_ds(np.eye(3), [0, 1, 2], 3)
    path = tmp_path / "t.tfe"
    save_embeddings(ds, path)
    data = path.read_bytes()
    # claim N=3 but drop one row of payload
    path.write_bytes(data[:-12])
    with pytest.raises(TruncationError):
        load_embeddings(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tfe"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 32)
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_label_out_of_range_rejected(tmp_path):
    path = tmp_path / "lbl.tfe"
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IIIB3x", 2, 1, 1, 0))
        fh.write(struct.pack("<I", 5))            # label 5 >= C=1
        fh.write(np.zeros(2, dtype="<f4").tobytes())
    with pytest.raises(ValidationError):
        load_embeddings(path)


def test_trailing_bytes_rejected(tmp_path):
    ds = make_ds([[1.0, 0.0]], [0], 1)
    path = tmp_path / "x.tfe"
    save_embeddings(ds, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(TruncationError):
        load_embeddings(path)


@settings(max_examples=60, deadline=None)
@given(cut=st.integers(min_value=0, max_value=3), extra=st.booleans(),
       seed=st.integers(min_value=0, max_value=1000))
def test_random_corruptions_rejected(tmp_path_factory, cut, extra, seed):
    # property: any byte-count inconsistency between header and payload fails
    tmp = tmp_path_factory.mktemp("corrupt")
    rng = np.random.default_rng(seed)
    ds = make_ds(rng.standard_normal((4, 3)), rng.integers(0, 2, 4), 2)
    path = tmp / "c.tfe"
    save_embeddings(ds, path)
    data = path.read_bytes()
    if extra:
        path.write_bytes(data + b"\0" * (cut + 1))
    else:
        path.write_bytes(data[: len(data) - (cut + 1)])
    with pytest.raises(TruncationError):
        load_embeddings(path)


def test_normalize_345():
    ds = make_ds([[3.0, 4.0]], [0], 1)
    out = normalize(ds)
    np.testing.assert_allclose(out.vectors, [[0.6, 0.8]], atol=1e-12)
    assert out.normalized


def test_normalize_idempotent_and_preserves_labels():
    rng = np.random.default_rng(1)
    ds = make_ds(rng.standard_normal((10, 4)) + 1.0, rng.integers(0, 3, 10), 3)
    once = normalize(ds)
    twice = normalize(once)
    assert twice is once
    np.testing.assert_allclose(np.linalg.norm(once.vectors, axis=1), 1.0, atol=1e-12)
    assert (once.labels == ds.labels).all()
    assert once.num_samples == ds.num_samples and once.dim == ds.dim


def test_normalize_zero_row_raises():
    ds = make_ds([[1.0, 0.0], [0.0, 0.0]], [0, 0], 1)
    with pytest.raises(DegenerateInputError, match="row 1"):
        normalize(ds)


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        make_ds([[1.0, 0.0]], [1], 1)            # label >= C
    with pytest.raises(ValidationError):
        make_ds([[1.0, 0.0]], [0, 0], 1)         # length mismatch
    with pytest.raises(ValidationError):
        make_ds([[3.0, 4.0]], [0], 1, normalized=True)  # norm != 1
    empty = make_ds(np.zeros((0, 3)), [], 2)     # empty client is legal
    assert empty.num_samples == 0


def test_prompt_bank_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    emb = rng.standard_normal((3, 4, 5)).astype(np.float32).astype(np.float64)
    emb /= np.linalg.norm(emb, axis=2, keepdims=True)
    emb = emb.astype(np.float32).astype(np.float64)
    bank = PromptBank(emb, normalized=False)
    path = tmp_path / "b.tfp"
    save_prompt_bank(bank, path)
    back = load_prompt_bank(path)
    assert back.num_classes == 3 and back.prompts_per_class == 4 and back.dim == 5
    assert (back.embeddings == bank.embeddings).all()


def test_prompt_bank_bad_magic(tmp_path):
    path = tmp_path / "bad.tfp"
    path.write_bytes(b"TOFAEMB1" + b"\0" * 16)
    with pytest.raises(FormatError):
        load_prompt_bank(path)
