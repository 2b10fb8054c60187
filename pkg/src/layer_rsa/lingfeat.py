import csv
import logging
import sys
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from nltk import Tree

from layer_rsa.errors import InputError, ValidationError
from layer_rsa.get_logger import get_logger
from layer_rsa.types import ConditionSet, FeatureVector

logger = get_logger("layer_rsa.lingfeat", logging.INFO)

# Penn treebank escapes for brackets and quotes
PENN_PUNCTUATION = {"-LRB-", "-RRB-", "-LCB-", "-RCB-", "-LSB-", "-RSB-", "``", "''"}

FEATURE_KINDS = ("yngve", "logfreq", "senses")


@dataclass(frozen=True)
class ParseTree:
    """
    Constituency tree of one sentence.
    """

    condition_id: str
    tree: Tree

    def __post_init__(self):
        _check_tree(self.tree)

    @property
    def leaves(self) -> list[str]:
        return self.tree.leaves()

    def to_bracketed(self) -> str:
        """
        Single-line bracketed text of the tree.
        """
        return self.tree.pformat(margin=sys.maxsize)


def _check_tree(tree: Tree) -> None:
    stack = [tree]
    while stack:
        node = stack.pop()
        if len(node) == 0:
            raise ValidationError(f"empty node ({node.label()})", kind="empty_node")
        stack.extend(child for child in node if isinstance(child, Tree))


def parse_bracketed(text: str, condition_id: str = "") -> ParseTree:
    """
    Parse a Penn-style bracketed tree, e.g. "(S (NP (DT the) (NN dog)) (VP (VBD ran)))".

    Args:
        text: Bracketed expression
        condition_id: Sentence id of the tree

    Returns:
        ParseTree object
    """
    try:
        tree = Tree.fromstring(text.strip(), remove_empty_top_bracketing=True)
    except ValueError as e:
        # nltk reports the character offset of the failure
        raise ValidationError(f"parse error in {condition_id or 'tree'}: {e}", kind="parse_error")

    if not isinstance(tree, Tree):
        raise ValidationError(f"parse error in {condition_id or 'tree'}: leaf-less tree", kind="parse_error")
    return ParseTree(condition_id=condition_id, tree=tree)


def load_trees(path: Path) -> list[ParseTree]:
    """
    Load one bracketed tree per line. A line may start with "<id><TAB>";
    otherwise the 1-based line number is the sentence id.

    Args:
        path: UTF-8 tree file

    Returns:
        List of ParseTree objects in file order
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read trees {path}: {e}", kind="trees_unreadable")

    trees = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cid, sep, text = line.partition("\t")
        if not sep:
            cid, text = str(line_no), line
        trees.append(parse_bracketed(text, condition_id=cid.strip()))
    return trees


def yngve_depths(tree: ParseTree) -> np.ndarray:
    """
    Yngve depth of every leaf: the children of a node with k children score
    k-1, ..., 0 from left to right, and a leaf's depth sums the scores on its
    path from the root.

    Args:
        tree: ParseTree object

    Returns:
        One depth per leaf, in sentence order
    """
    depths = []
    stack: list[tuple[Tree | str, int]] = [(tree.tree, 0)]
    while stack:
        node, depth = stack.pop()
        if not isinstance(node, Tree):
            depths.append(depth)
            continue
        k = len(node)
        stack.extend((node[idx], depth + k - 1 - idx) for idx in reversed(range(k)))

    return np.asarray(depths, dtype=np.float64)


def yngve_sentence_score(tree: ParseTree) -> float:
    """
    Mean Yngve depth over the leaves of a tree.
    """
    return float(yngve_depths(tree).mean())


def is_punctuation(token: str) -> bool:
    return token in PENN_PUNCTUATION or (
        bool(token) and all(unicodedata.category(c).startswith("P") for c in token)
    )


def strip_punctuation(words: Sequence[str]) -> list[str]:
    return [w for w in words if not is_punctuation(w)]


def strip_tree_punctuation(tree: ParseTree) -> ParseTree:
    """
    Remove punctuation leaves and the constituents they leave empty.

    Args:
        tree: ParseTree object

    Returns:
        Pruned ParseTree object
    """

    def prune(node: Tree) -> Tree | None:
        children = []
        for child in node:
            if isinstance(child, Tree):
                child = prune(child)
                if child is not None:
                    children.append(child)
            elif not is_punctuation(child):
                children.append(child)
        return Tree(node.label(), children) if children else None

    pruned = prune(tree.tree)
    if pruned is None:
        raise ValidationError(f"{tree.condition_id}: leaf-less tree after punctuation removal", kind="parse_error")
    return ParseTree(condition_id=tree.condition_id, tree=pruned)


@dataclass(frozen=True)
class Lexicon:
    """
    Word values (corpus counts or sense counts). Lookup tries the exact word,
    then its lowercase form, then the out-of-vocabulary default.
    """

    values: dict[str, float] = field(default_factory=dict)
    default: float = 0.0
    case_fold: bool = True

    def __post_init__(self):
        if self.default < 0 or any(v < 0 or not np.isfinite(v) for v in self.values.values()):
            raise ValidationError("lexicon values must be finite and >= 0", kind="invalid_lexicon")

    def __getitem__(self, word: str) -> float:
        if word in self.values:
            return self.values[word]
        if self.case_fold and (folded := word.lower()) in self.values:
            return self.values[folded]
        return self.default


def load_lexicon(path: Path, default: float = 0.0, case_fold: bool = True) -> Lexicon:
    """
    Load a lexicon from a headerless TSV file of word<TAB>value lines.

    Args:
        path: TSV file
        default: Value of out-of-vocabulary words
        case_fold: Fall back to the lowercase form of a word

    Returns:
        Lexicon object
    """
    try:
        frame = pd.read_csv(
            path,
            sep="\t",
            header=None,
            names=["word", "value"],
            dtype={"word": str, "value": str},
            keep_default_na=False,
            quoting=csv.QUOTE_NONE,
        )
    except (OSError, pd.errors.ParserError) as e:
        raise InputError(f"cannot read lexicon {path}: {e}", kind="lexicon_unreadable")
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=["word", "value"])

    if frame["word"].duplicated().any():
        duplicates = frame.loc[frame["word"].duplicated(), "word"].tolist()
        raise ValidationError(f"{path}: duplicate words {', '.join(duplicates[:10])}", kind="invalid_lexicon")

    try:
        values = dict(zip(frame["word"], frame["value"].astype(np.float64)))
    except ValueError as e:
        raise ValidationError(f"{path}: {e}", kind="invalid_lexicon")

    logger.info(f"Loaded lexicon with {len(values)} entries from {path}")
    return Lexicon(values=values, default=default, case_fold=case_fold)


def _check_words(words: Sequence[str]) -> None:
    if len(words) == 0:
        raise ValidationError("empty sentence")


def avg_log_frequency(words: Sequence[str], lexicon: Lexicon) -> float:
    """
    Mean of ln(count + 1) over the words of a sentence.

    Args:
        words: Words of the sentence
        lexicon: Corpus counts

    Returns:
        Average log frequency
    """
    _check_words(words)
    return float(np.mean(np.log1p([lexicon[w] for w in words])))


def avg_senses(words: Sequence[str], lexicon: Lexicon) -> float:
    """
    Mean number of senses over the words of a sentence.

    Args:
        words: Words of the sentence
        lexicon: Sense counts, usually with an out-of-vocabulary default of 1

    Returns:
        Average senses per word
    """
    _check_words(words)
    return float(np.mean([lexicon[w] for w in words]))


def load_sentences(path: Path) -> list[tuple[str, list[str]]]:
    """
    Load tokenized sentences, one "<id><TAB><space-separated words>" line each.

    Args:
        path: UTF-8 sentence file

    Returns:
        List of (id, words) tuples in file order
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read sentences {path}: {e}", kind="sentences_unreadable")

    sentences = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cid, sep, text = line.partition("\t")
        if not sep:
            raise ValidationError(f"{path}:{line_no}: expected <id><TAB><words>", kind="invalid_sentences")
        sentences.append((cid.strip(), text.split()))
    return sentences


def sentence_features(
    sentences: Sequence[tuple[str, Sequence[str]]],
    kind: str,
    lexicon: Lexicon,
    strip_punct: bool = False,
) -> FeatureVector:
    """
    Word-based feature vector (logfreq or senses) over a list of sentences.

    Args:
        sentences: (id, words) tuples
        kind: "logfreq" or "senses"
        lexicon: Lexicon of counts or senses
        strip_punct: Drop punctuation tokens first

    Returns:
        FeatureVector named after the kind
    """
    scorer = {"logfreq": avg_log_frequency, "senses": avg_senses}.get(kind)
    if scorer is None:
        raise ValidationError(f"unknown word feature {kind!r}", kind="invalid_feature_kind")

    values = [
        scorer(strip_punctuation(words) if strip_punct else list(words), lexicon)
        for _, words in sentences
    ]
    return FeatureVector(
        conditions=ConditionSet(tuple(cid for cid, _ in sentences)),
        name=kind,
        values=np.asarray(values, dtype=np.float64),
    )


def tree_features(
    trees: Sequence[ParseTree],
    kind: str,
    lexicon: Lexicon | None = None,
    strip_punct: bool = False,
) -> FeatureVector:
    """
    Feature vector over parse trees: Yngve scores, or word features of the leaves.

    Args:
        trees: ParseTree objects
        kind: "yngve", "logfreq" or "senses"
        lexicon: Lexicon, required for the word features
        strip_punct: Remove punctuation leaves first

    Returns:
        FeatureVector named after the kind
    """
    if strip_punct:
        trees = [strip_tree_punctuation(t) for t in trees]

    if kind != "yngve":
        if lexicon is None:
            raise ValidationError(f"{kind} needs a lexicon", kind="missing_lexicon")
        return sentence_features([(t.condition_id, t.leaves) for t in trees], kind, lexicon)

    return FeatureVector(
        conditions=ConditionSet(tuple(t.condition_id for t in trees)),
        name=kind,
        values=np.asarray([yngve_sentence_score(t) for t in trees], dtype=np.float64),
    )
