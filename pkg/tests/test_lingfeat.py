import math

import numpy as np
import pytest
from nltk import Tree

from layer_rsa.errors import ValidationError
from layer_rsa.lingfeat import (
    avg_log_frequency,
    avg_senses,
    Lexicon,
    load_lexicon,
    load_sentences,
    load_trees,
    parse_bracketed,
    ParseTree,
    sentence_features,
    strip_punctuation,
    strip_tree_punctuation,
    tree_features,
    yngve_depths,
    yngve_sentence_score,
)

DOG_TREE = "(S (NP (DT the) (NN dog)) (VP (VBD ran)))"


def _random_tree(rng, depth: int = 0, counter=None) -> Tree:
    counter = counter if counter is not None else [0]
    k = int(rng.integers(1, 4))
    children = []
    for _ in range(k):
        if depth < 4 and rng.random() < 0.5:
            children.append(_random_tree(rng, depth + 1, counter))
        else:
            counter[0] += 1
            children.append(f"w{counter[0]}")
    return Tree(f"X{depth}", children)


def _node_mass(tree: Tree) -> int:
    """Total leaf depth as the sum over nodes of child score times leaves below the child."""
    total = 0
    for node in tree.subtrees():
        k = len(node)
        for idx, child in enumerate(node):
            leaves = len(child.leaves()) if isinstance(child, Tree) else 1
            total += (k - 1 - idx) * leaves
    return total


class TestParseBracketed:
    def test_single_leaf(self):
        tree = parse_bracketed("(X w)")
        assert tree.tree.label() == "X"
        assert tree.leaves == ["w"]

    def test_dog_tree(self):
        assert parse_bracketed(DOG_TREE).leaves == ["the", "dog", "ran"]

    def test_whitespace_insensitive(self):
        assert parse_bracketed("(S\n  (NP (DT the)   (NN dog))\t(VP (VBD ran)))") == parse_bracketed(DOG_TREE)

    def test_truncated(self):
        with pytest.raises(ValidationError, match="parse error"):
            parse_bracketed("(S (NP (DT the)")

    def test_empty_node(self):
        with pytest.raises(ValidationError, match="empty node"):
            parse_bracketed("(S (NP) (VP ran))")

    def test_round_trip(self):
        tree = parse_bracketed(DOG_TREE)
        assert tree.to_bracketed() == DOG_TREE
        assert parse_bracketed(tree.to_bracketed()) == tree

    def test_load_trees_with_ids(self, tmp_path):
        path = tmp_path / "trees.mrg"
        path.write_text(f"s7\t{DOG_TREE}\n\n(X w)\n", encoding="utf-8")
        trees = load_trees(path)
        assert [t.condition_id for t in trees] == ["s7", "3"]


class TestYngve:
    """Yngve depths and sentence scores."""

    def test_dog_tree(self):
        tree = parse_bracketed(DOG_TREE)
        np.testing.assert_array_equal(yngve_depths(tree), [2, 1, 0])
        assert yngve_sentence_score(tree) == 1.0

    @pytest.mark.parametrize("n", range(1, 21))
    def test_flat_tree(self, n):
        tree = parse_bracketed("(S " + " ".join(f"w{i}" for i in range(n)) + ")")
        np.testing.assert_array_equal(yngve_depths(tree), np.arange(n - 1, -1, -1))
        assert yngve_sentence_score(tree) == (n - 1) / 2

    def test_right_spine(self):
        tree = parse_bracketed("(S a (X b (Y c (Z d))))")
        depths = yngve_depths(tree)
        assert depths[-1] == 0
        np.testing.assert_array_equal(depths, [1, 1, 1, 0])

    def test_single_leaf(self):
        assert yngve_sentence_score(parse_bracketed("(X w)")) == 0.0

    def test_leaf_and_node_mass_agree(self, rng):
        for _ in range(500):
            tree = _random_tree(rng)
            depths = yngve_depths(ParseTree("t", tree))
            assert depths.sum() == _node_mass(tree)

    def test_relabeling_invariance(self, rng):
        for _ in range(20):
            tree = _random_tree(rng)
            relabeled = tree.copy(deep=True)
            for node in relabeled.subtrees():
                node.set_label("Q")
            assert np.array_equal(yngve_depths(ParseTree("t", tree)), yngve_depths(ParseTree("t", relabeled)))


class TestLexicalFeatures:
    """Average log frequency and senses against hand computations."""

    LEXICON = Lexicon({"the": 1000.0, "dog": 40.0, "Dog": 3.0, "ran": 12.0, "cat": 0.0})

    def test_all_oov(self):
        assert avg_log_frequency(["zzz", "yyy"], self.LEXICON) == 0.0

    def test_one_word(self):
        lexicon = Lexicon({"e": math.e - 1})
        assert avg_log_frequency(["e"], lexicon) == pytest.approx(1.0, abs=1e-15)

    def test_hand_computed(self):
        words = ["The", "Dog", "ran"]
        expected = (math.log(1001) + math.log(4) + math.log(13)) / 3
        assert avg_log_frequency(words, self.LEXICON) == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_counts(self):
        words = ["the", "dog", "ran"]
        before = avg_log_frequency(words, self.LEXICON)
        after = avg_log_frequency(words, Lexicon({**self.LEXICON.values, "dog": 41.0}))
        assert after >= before

    def test_senses(self):
        lexicon = Lexicon({"bank": 10.0, "run": 4.0, "a": 2.0}, default=1.0)
        assert avg_senses(["a", "run"], lexicon) == 3.0
        assert avg_senses(["x", "y"], lexicon) == 1.0
        assert avg_senses(["Bank", "zzz", "run"], lexicon) == pytest.approx(5.0, abs=1e-12)

    def test_empty_sentence(self):
        with pytest.raises(ValidationError, match="empty sentence"):
            avg_senses([], self.LEXICON)

    def test_negative_values_rejected(self):
        with pytest.raises(ValidationError):
            Lexicon({"a": -1.0})

    def test_load_lexicon(self, tmp_path):
        path = tmp_path / "freq.tsv"
        path.write_text('the\t1000\n"\t5\nnull\t2\n', encoding="utf-8")
        lexicon = load_lexicon(path)
        assert lexicon["the"] == 1000.0
        assert lexicon['"'] == 5.0
        assert lexicon["null"] == 2.0
        assert lexicon["missing"] == 0.0


class TestPunctuation:
    def test_strip_words(self):
        assert strip_punctuation(["Hello", ",", "world", "...", "``", "!"]) == ["Hello", "world"]

    def test_strip_tree(self):
        tree = parse_bracketed("(S (NP (NN dogs)) (VP (VBP bark)) (. .))")
        stripped = strip_tree_punctuation(tree)
        assert stripped.to_bracketed() == "(S (NP (NN dogs)) (VP (VBP bark)))"

    def test_tree_features_with_stripping(self):
        tree = parse_bracketed("(S a b (. .))", "s1")
        assert tree_features([tree], "yngve").values[0] == 1.0
        assert tree_features([tree], "yngve", strip_punct=True).values[0] == 0.5

    def test_sentence_features(self, tmp_path):
        path = tmp_path / "sentences.tsv"
        path.write_text("s1\tthe dog ran .\ns2\tcat\n", encoding="utf-8")
        lexicon = Lexicon({"the": 1.0, "cat": 3.0}, default=1.0)
        feature = sentence_features(load_sentences(path), "senses", lexicon, strip_punct=True)
        assert feature.conditions.ids == ("s1", "s2")
        np.testing.assert_array_equal(feature.values, [1.0, 3.0])
