"""Iserles-Norsett binary trees of the Magnus expansion.

A tree is either the leaf or ``pair(left, right)``, read as
``H_tau(t) = [int_0^t H_left(s) ds, H_right(t)]``: the left child is
integrated, the right child is evaluated at the parent's time.  The Magnus
term of order ``k`` sums over trees with ``k`` leaves (``order = k - 1``).

Leaves are labelled ``1..k`` by a depth-first traversal that visits the
right (non-integrated) child before the left one, so label 1 always carries
the outermost time.  Placement bitmasks use bit ``j - 1`` for leaf ``j``.
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from itertools import product
from math import comb, factorial, prod

import numpy as np

from .errors import LimitError, ValidationError

MAX_TREE_ORDER = 12


class BinaryTree:
    """Immutable binary tree node.  Instances compare by identity.

    Trees returned by :func:`enumerate_trees` share their subtrees, which
    lets callers memoise per-subtree work on ``id(tree)``.
    """

    __slots__ = ("left", "right", "order", "leaf_count")

    def __init__(self, left: BinaryTree | None = None, right: BinaryTree | None = None):
        if (left is None) != (right is None):
            raise ValidationError("a pair node needs both children")
        self.left = left
        self.right = right
        if left is None:
            self.order = 0
            self.leaf_count = 1
        else:
            self.order = left.order + right.order + 1
            self.leaf_count = left.leaf_count + right.leaf_count

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def spine(self) -> list[BinaryTree]:
        """Integrated subtrees ``tau_1..tau_s`` hanging off the right spine.

        Every tree is uniquely ``[int tau_1, [int tau_2, ... [int tau_s, H]]]``.
        """
        out = []
        node = self
        while not node.is_leaf:
            out.append(node.left)
            node = node.right
        return out

    def leaf_labels(self) -> list[int]:
        """Leaf labels in left-to-right drawing order (left child first)."""
        return _drawing_labels(self, 0)

    def to_string(self) -> str:
        if self.is_leaf:
            return "o"
        return f"[{self.left.to_string()},{self.right.to_string()}]"

    def __repr__(self) -> str:
        return f"BinaryTree({self.to_string()})"


LEAF = BinaryTree()


def pair(left: BinaryTree, right: BinaryTree) -> BinaryTree:
    return BinaryTree(left, right)


def _drawing_labels(tree: BinaryTree, offset: int) -> list[int]:
    if tree.is_leaf:
        return [offset + 1]
    return _drawing_labels(tree.left, offset + tree.right.leaf_count) + _drawing_labels(tree.right, offset)


def enumerate_trees(k: int) -> tuple[BinaryTree, ...]:
    """All trees of order ``k`` (``k + 1`` leaves), deterministically ordered.

    Ordered by the order of the integrated left child, then recursively by
    the enumeration order of each child.
    """
    if k < 0:
        raise ValidationError("tree order must be non-negative")
    if k > MAX_TREE_ORDER:
        raise LimitError(f"tree order {k} exceeds the guard {MAX_TREE_ORDER}")
    return _enumerate(k)


@lru_cache(maxsize=None)
def _enumerate(k: int) -> tuple[BinaryTree, ...]:
    if k == 0:
        return (LEAF,)
    out = []
    for m1 in range(k):
        for left in _enumerate(m1):
            for right in _enumerate(k - 1 - m1):
                out.append(BinaryTree(left, right))
    return tuple(out)


@lru_cache(maxsize=None)
def bernoulli(n: int) -> Fraction:
    """Bernoulli number with the ``B_1 = -1/2`` convention."""
    if n == 0:
        return Fraction(1)
    return -sum(comb(n + 1, j) * bernoulli(j) for j in range(n)) / (n + 1)


def tree_weight(tree: BinaryTree) -> Fraction:
    """Exact weight ``alpha(tau) = B_s / s! * prod_l alpha(tau_l)`` over the spine."""
    return _weight(tree)


_weight_cache: dict[int, tuple[BinaryTree, Fraction]] = {}


def _weight(tree: BinaryTree) -> Fraction:
    hit = _weight_cache.get(id(tree))
    if hit is not None and hit[0] is tree:
        return hit[1]
    if tree.is_leaf:
        w = Fraction(1)
    else:
        spine = tree.spine()
        s = len(spine)
        w = bernoulli(s) / factorial(s)
        for sub in spine:
            if w == 0:
                break
            w *= _weight(sub)
    _weight_cache[id(tree)] = (tree, w)
    return w


def integrated_subtrees(tree: BinaryTree) -> list[tuple[int, ...]]:
    """Leaf-label sets of every integrated subtree, root first.

    The chained integral over ``[0, 1]`` of ``prod_j x_j^{e_j}`` equals
    ``prod_sigma 1 / (sum_{j in sigma} e_j + |sigma|)`` over these sets.
    """
    out: list[tuple[int, ...]] = []

    def walk(node: BinaryTree, offset: int, integrated: bool) -> tuple[int, ...]:
        if node.is_leaf:
            labels = (offset + 1,)
        else:
            right = walk(node.right, offset, False)
            left = walk(node.left, offset + node.right.leaf_count, True)
            labels = right + left
        if integrated:
            out.append(tuple(sorted(labels)))
        return labels

    walk(tree, 0, True)
    out.sort(key=len, reverse=True)
    return out


def tree_monomial_integral(tree: BinaryTree, exponents=None) -> Fraction:
    """Exact chained integral over ``[0, 1]`` with ``x_j^{e_j}`` at leaf ``j``.

    Evaluated leaf-to-root: integrating a subtree whose integrand has
    accumulated exponent ``g`` contributes ``1 / (g + 1)`` and hands
    ``x^(g + 1)`` to its parent; sibling exponents add at branch points.
    """
    exponents = dict(exponents or {})
    k = tree.leaf_count
    for label, e in exponents.items():
        if not (1 <= int(label) <= k):
            raise ValidationError(f"leaf label {label} outside 1..{k}")
        if int(e) < 0:
            raise ValidationError("exponents must be non-negative")

    def sweep(node: BinaryTree, offset: int) -> tuple[Fraction, int]:
        # returns (coefficient, exponent) of H_node evaluated on monomials
        if node.is_leaf:
            return Fraction(1), int(exponents.get(offset + 1, 0))
        c_r, e_r = sweep(node.right, offset)
        c_l, e_l = sweep(node.left, offset + node.right.leaf_count)
        return c_r * c_l / (e_l + 1), e_l + 1 + e_r

    coeff, exponent = sweep(tree, 0)
    return coeff / (exponent + 1)


def tree_commutator_chain(tree: BinaryTree, placement: int, a_coeffs, b_coeffs, sc) -> np.ndarray:
    """Basis coefficients of the bracket chain of ``tree`` for one A/B placement.

    Bit ``j - 1`` of ``placement`` puts ``B`` at leaf ``j``; otherwise ``A``.
    Brackets are Hermitian (``-i[.,.]``) so the result is real.  Chains that
    bracket two identical generator leaves are pruned to zero.
    """
    a = np.asarray(a_coeffs, dtype=float)
    b = np.asarray(b_coeffs, dtype=float)
    c = sc.tensor if hasattr(sc, "tensor") else np.asarray(sc)
    D = c.shape[0]
    if a.shape != (D,) or b.shape != (D,):
        raise ValidationError(f"coefficient vectors must have length {D}")
    if placement < 0 or placement >= 1 << tree.leaf_count:
        raise ValidationError("placement bitmask out of range")

    def chain(node: BinaryTree, offset: int) -> np.ndarray | None:
        if node.is_leaf:
            return b if (placement >> offset) & 1 else a
        n_r = node.right.leaf_count
        if node.left.is_leaf and node.right.is_leaf:
            if ((placement >> offset) & 1) == ((placement >> (offset + 1)) & 1):
                return None
        right = chain(node.right, offset)
        if right is None:
            return None
        left = chain(node.left, offset + n_r)
        if left is None:
            return None
        return np.einsum("i,j,ijk->k", left, right, c)

    out = chain(tree, 0)
    return np.zeros(D) if out is None else out


def all_placement_chains(tree: BinaryTree, a_coeffs, b_coeffs, c: np.ndarray, memo: dict | None = None) -> np.ndarray:
    """Chains for every placement at once, shape ``(2**k, D)`` indexed by bitmask."""
    if memo is None:
        memo = {}
    leaf_block = np.stack([np.asarray(a_coeffs, float), np.asarray(b_coeffs, float)])
    D = c.shape[0]
    c_flat = c.reshape(D, D * D)

    def rec(node: BinaryTree) -> np.ndarray:
        if node.is_leaf:
            return leaf_block
        hit = memo.get(id(node))
        if hit is not None and hit[0] is node:
            return hit[1]
        left = rec(node.left)
        right = rec(node.right)
        # out[l, r, k] = sum_ij left[l, i] right[r, j] c[i, j, k]
        tmp = (left @ c_flat).reshape(left.shape[0], D, D)
        out = np.einsum("lij,ri->lrj", tmp, right).reshape(-1, D)
        if node.leaf_count <= 9:
            memo[id(node)] = (node, out)
        return out

    return rec(tree)


def exponent_vectors(k: int, max_total: int, max_each: int) -> np.ndarray:
    """All ``e`` in ``{0..max_each}^k`` with ``sum(e) <= max_total``, lexicographic."""
    if max_total < 0:
        return np.zeros((0, k), dtype=np.int64)
    rows = [e for e in product(range(min(max_each, max_total) + 1), repeat=k) if sum(e) <= max_total]
    return np.array(rows, dtype=np.int64).reshape(len(rows), k)


def integral_denominators(tree: BinaryTree, evecs: np.ndarray) -> list[int]:
    """Integer ``N`` with ``tree_monomial_integral(tree, e) == 1 / N`` for each row of ``evecs``."""
    k = tree.leaf_count
    subsets = integrated_subtrees(tree)
    member = np.zeros((len(subsets), k), dtype=np.int64)
    sizes = np.array([len(s) for s in subsets], dtype=np.int64)
    for r, labels in enumerate(subsets):
        member[r, [j - 1 for j in labels]] = 1
    factors = evecs @ member.T + sizes
    return [prod(int(f) for f in row) for row in factors]
