import numpy as np
import pytest

from taskseg import gradkernel as gk
from taskseg.annotations import CapacityError, ClassTable, Target, TaskGroundTruth, TaskKind
from taskseg.textgen import (
    BOS,
    EOS,
    PAD,
    UNK,
    TextList,
    TextMapper,
    Vocabulary,
    build_text_list,
    text_mapper_forward,
    tokenize,
)

TABLE = ClassTable.from_pairs([("car", True), ("person", True), ("road", False), ("traffic light", True)])


def _gt(task, class_ids):
    return TaskGroundTruth(TaskKind(task), [Target(c, np.ones((2, 2), bool)) for c in class_ids])


def test_panoptic_text_list():
    tl = build_text_list(_gt("panoptic", [0, 0, 2]), TABLE, 6)
    assert list(tl.entries) == [
        "a photo with a car",
        "a photo with a car",
        "a photo with a road",
        "a panoptic photo",
        "a panoptic photo",
        "a panoptic photo",
    ]
    assert tl.n_real == 3


def test_all_padding():
    assert list(build_text_list(_gt("semantic", []), TABLE, 3).entries) == ["a semantic photo"] * 3


def test_instance_article():
    assert list(build_text_list(_gt("instance", [1]), TABLE, 2).entries) == ["a photo with a person", "a instance photo"]


def test_capacity_error_carries_overflow():
    with pytest.raises(CapacityError) as err:
        build_text_list(_gt("panoptic", [0, 1, 2, 0]), TABLE, 2)
    assert "2" in str(err.value)


# ---- tokenizer


def test_tokenize_deterministic():
    vocab = Vocabulary.from_classes(TABLE)
    assert tokenize("a panoptic photo", vocab) == tokenize("a panoptic photo", vocab)


def test_tokenize_empty():
    seq = tokenize("   ", Vocabulary.from_classes(TABLE), width=6)
    assert seq.ids == (BOS, EOS, PAD, PAD, PAD, PAD)
    assert seq.length == 2


def test_class_names_have_no_unknowns():
    vocab = Vocabulary.from_classes(TABLE)
    for name in TABLE.names:
        ids = tokenize(f"a photo with a {name}", vocab).ids
        assert UNK not in ids


def test_unknown_word_maps_to_unk():
    assert UNK in tokenize("a zebra", Vocabulary.from_classes(TABLE)).ids


def test_case_folding():
    vocab = Vocabulary.from_classes(TABLE)
    assert tokenize("A Photo", vocab) == tokenize("a photo", vocab)


def test_vocab_file_roundtrip(tmp_path):
    vocab = Vocabulary.from_classes(TABLE)
    vocab.save(tmp_path / "vocab.txt")
    again = Vocabulary.load(tmp_path / "vocab.txt")
    assert again.tokens == vocab.tokens


def test_vocab_file_rejects_missing_reserved(tmp_path):
    (tmp_path / "v.txt").write_text("car\nroad\n")
    with pytest.raises(ValueError):
        Vocabulary.load(tmp_path / "v.txt")


def test_truncation_keeps_eos():
    seq = tokenize("a photo with a car a photo with a car", Vocabulary.from_classes(TABLE), width=5)
    assert len(seq.ids) == 5 and seq.ids[-1] == EOS


# ---- mapper


def _mapper(n_ctx=3, seed=0):
    return TextMapper(Vocabulary.from_classes(TABLE), 8, n_ctx, depth=1, heads=2, width=8,
                      rng=np.random.default_rng(seed))


def test_identical_entries_identical_rows():
    tl = TextList(("a photo with a car", "a photo with a road", "a photo with a car"), 3)
    rows = text_mapper_forward(tl, _mapper()).data
    np.testing.assert_array_equal(rows[0], rows[2])
    assert not np.allclose(rows[0], rows[1])


def test_context_rows_are_the_parameter():
    mapper = _mapper()
    tl = build_text_list(_gt("panoptic", [0]), TABLE, 4)
    out = text_mapper_forward(tl, mapper)
    assert out.shape == (7, 8)
    np.testing.assert_array_equal(out.data[4:], mapper.context.data)


def test_mapper_without_context():
    out = text_mapper_forward(build_text_list(_gt("instance", [0]), TABLE, 4), _mapper(n_ctx=0))
    assert out.shape == (4, 8)


def test_mapper_gradient_wrt_token_embeddings():
    mapper = _mapper(seed=4)
    tl = build_text_list(_gt("panoptic", [0, 2]), TABLE, 4)
    r = np.random.default_rng(1).normal(size=(7, 8))
    f = lambda: gk.sum(text_mapper_forward(tl, mapper) * r)  # noqa: E731
    err = gk.finite_diff_check(f, [mapper.encoder.token_embed.weight], step=1e-3, max_coords=64,
                               rng=np.random.default_rng(0))
    assert err <= 1e-3
