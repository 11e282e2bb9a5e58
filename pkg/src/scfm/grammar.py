"""Probabilistic context-free grammars: rule tables, tree sampling, scoring.

This layer is plain Python/numpy (no tape); learnable rule probabilities
live in :mod:`scfm.pcfg`.  Derivations expand the leftmost pending
non-terminal first, and an expansion budget triggers termination forcing:
once the budget is hit, every further choice renormalizes over the rules
of that non-terminal with the fewest non-terminal right-hand symbols, so
the sampler remains a proper (truncated-support) distribution.
"""

from __future__ import annotations

import numpy as np

from importlib import resources


class GrammarError(ValueError):
    pass


class Grammar:
    """Immutable rule table with per-non-terminal probabilities."""

    def __init__(self, rules, start, terminals=None, non_terminals=None):
        self.rules = {nt: [(tuple(rhs), float(p)) for rhs, p in prods] for nt, prods in rules.items()}
        self.start = start
        self.non_terminals = list(self.rules.keys())
        declared_nt = set(self.non_terminals)
        if non_terminals is not None and set(non_terminals) != declared_nt:
            raise GrammarError("declared non-terminals do not match rule table")
        seen = []
        for nt, prods in self.rules.items():
            if not prods:
                raise GrammarError(f"non-terminal {nt!r} has no productions")
            total = sum(p for _, p in prods)
            if abs(total - 1.0) > 1e-9:
                raise GrammarError(
                    f"probabilities for {nt!r} sum to {total!r}, expected 1"
                )
            for rhs, p in prods:
                if not rhs:
                    raise GrammarError(f"empty right-hand side for {nt!r}")
                if p < 0:
                    raise GrammarError(f"negative probability for {nt!r}")
                for sym in rhs:
                    if sym not in declared_nt and sym not in seen:
                        seen.append(sym)
        if terminals is None:
            self.terminals = seen
        else:
            self.terminals = list(terminals)
            undeclared = [s for s in seen if s not in set(self.terminals)]
            if undeclared:
                raise GrammarError(f"undeclared symbols on right-hand sides: {undeclared}")
        if start not in declared_nt:
            raise GrammarError(f"start symbol {start!r} has no productions")

        self.nt_index = {nt: i for i, nt in enumerate(self.non_terminals)}
        self.terminal_index = {t: i for i, t in enumerate(self.terminals)}
        self._probs = {nt: np.array([p for _, p in prods]) for nt, prods in self.rules.items()}
        self._cum = {nt: np.cumsum(p) for nt, p in self._probs.items()}
        # forcing restricts to the rules with the fewest non-terminal symbols
        self._forcing = {}
        self._forcing_cum = {}
        for nt, prods in self.rules.items():
            nt_counts = [sum(1 for s in rhs if s in declared_nt) for rhs, _ in prods]
            best = min(nt_counts)
            idx = np.array([i for i, c in enumerate(nt_counts) if c == best])
            p = self._probs[nt][idx]
            total = p.sum()
            if total <= 0:
                raise GrammarError(f"forcing rules for {nt!r} carry zero probability")
            self._forcing[nt] = idx
            self._forcing_cum[nt] = np.cumsum(p / total)
        # global rule ids: concatenation of per-non-terminal rule lists
        self.rule_offsets = {}
        off = 0
        for nt in self.non_terminals:
            self.rule_offsets[nt] = off
            off += len(self.rules[nt])
        self.num_rules = off

    def rule_probs(self, nt):
        return self._probs[nt]

    def forcing_rule_indices(self, nt):
        return self._forcing[nt]

    def global_rule_id(self, nt, rule_index):
        return self.rule_offsets[nt] + rule_index

    def is_non_terminal(self, symbol):
        return symbol in self.nt_index


def load_grammar(text):
    """Parse the rule-file format: ``LHS -> sym1 sym2 ... : prob`` per line,
    ``#`` comments, first rule's left-hand side is the start symbol."""
    rules = {}
    start = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line:
            raise GrammarError(f"line {ln}: expected 'LHS -> symbols : prob'")
        lhs, rest = line.split("->", 1)
        lhs = lhs.strip()
        if not lhs:
            raise GrammarError(f"line {ln}: missing left-hand side")
        if ":" not in rest:
            raise GrammarError(f"line {ln}: missing ': prob'")
        rhs_part, prob_part = rest.rsplit(":", 1)
        rhs = tuple(rhs_part.split())
        if not rhs:
            raise GrammarError(f"line {ln}: empty right-hand side")
        try:
            prob = float(prob_part.strip())
        except ValueError as exc:
            raise GrammarError(f"line {ln}: bad probability {prob_part.strip()!r}") from exc
        if start is None:
            start = lhs
        rules.setdefault(lhs, []).append((rhs, prob))
    if start is None:
        raise GrammarError("no rules found")
    return Grammar(rules, start)


def load_astronomers():
    """The bundled six-word benchmark grammar."""
    text = resources.files("scfm.assets").joinpath("astronomers.pcfg").read_text()
    return load_grammar(text)


class ParseTree:
    """Derivation node: symbol, chosen rule, children aligned with the RHS.

    ``children`` holds terminal strings inline and ``ParseTree`` nodes for
    non-terminal slots.  ``forced`` on a returned root records whether any
    expansion in the derivation was budget-forced.
    """

    __slots__ = ("symbol", "rule_index", "children", "forced")

    def __init__(self, symbol, rule_index, children=None, forced=False):
        self.symbol = symbol
        self.rule_index = rule_index
        self.children = children if children is not None else []
        self.forced = forced

    def __repr__(self):
        return f"ParseTree({to_bracketed(self)!r})"


_FORCE_GUARD_FACTOR = 50
_FORCE_GUARD_BASE = 1000


def _guard_limit(max_expansions):
    return _FORCE_GUARD_FACTOR * max_expansions + _FORCE_GUARD_BASE


def sample_tree(grammar, rng, max_expansions):
    """Ancestral sample, leftmost-first, with termination forcing at the
    expansion budget."""
    if max_expansions < 1:
        raise ValueError("max_expansions must be >= 1")
    guard = _guard_limit(max_expansions)
    expansions = 0
    forced_any = False
    root = ParseTree(grammar.start, -1)
    stack = [(grammar.start, root)]  # (symbol, node to fill)
    while stack:
        if expansions > guard:
            raise GrammarError("no terminating derivation under forcing")
        symbol, node = stack.pop()
        u = rng.random()
        if expansions >= max_expansions:
            forced_any = True
            allowed = grammar.forcing_rule_indices(symbol)
            rule_idx = int(allowed[np.searchsorted(grammar._forcing_cum[symbol], u)])
        else:
            rule_idx = int(np.searchsorted(grammar._cum[symbol], u))
            rule_idx = min(rule_idx, len(grammar.rules[symbol]) - 1)
        expansions += 1
        node.rule_index = rule_idx
        rhs = grammar.rules[symbol][rule_idx][0]
        pending = []
        for sym in rhs:
            if grammar.is_non_terminal(sym):
                child = ParseTree(sym, -1)
                node.children.append(child)
                pending.append((sym, child))
            else:
                node.children.append(sym)
        stack.extend(reversed(pending))
    root.forced = forced_any
    return root


def tree_log_prob(grammar, tree):
    """Log-probability of the derivation under the (unforced) grammar."""
    total = 0.0
    stack = [tree]
    while stack:
        node = stack.pop()
        probs = grammar.rule_probs(node.symbol)
        if not 0 <= node.rule_index < len(probs):
            raise IndexError(f"rule index {node.rule_index} out of range for {node.symbol!r}")
        total += float(np.log(probs[node.rule_index]))
        for child in node.children:
            if isinstance(child, ParseTree):
                stack.append(child)
    return total


def yield_sentence(tree):
    """Left-to-right terminal leaves."""
    out = []
    stack = [tree]
    while stack:
        node = stack.pop()
        if isinstance(node, str):
            out.append(node)
            continue
        stack.extend(reversed(node.children))
    return out


def decision_sequence(tree):
    """(symbol, rule_index) pairs in the leftmost derivation order."""
    seq = []
    stack = [tree]
    while stack:
        node = stack.pop()
        seq.append((node.symbol, node.rule_index))
        stack.extend(
            reversed([c for c in node.children if isinstance(c, ParseTree)])
        )
    return seq


def to_bracketed(tree):
    parts = []
    for child in tree.children:
        parts.append(to_bracketed(child) if isinstance(child, ParseTree) else child)
    return "(" + tree.symbol + " " + " ".join(parts) + ")"


def levenshtein(a, b):
    """Token-level edit distance (unit-cost insert/delete/substitute)."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, tok_b in enumerate(b, start=1):
            cost = 0 if tok_a == tok_b else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


def relaxed_log_likelihood(sentence, tree):
    """log p(x | z) = -(edit distance between x and the tree's yield)^2."""
    d = levenshtein(sentence, yield_sentence(tree))
    return -float(d) ** 2
