"""PCFG benchmark: learnable rule probabilities, amortized parsing, trainer.

The generative side learns per-non-terminal rule logits over the known
grammar structure; observations are sentences, scored against a tree's
yield through a squared-edit-distance relaxation.  The inference network
generates derivations sequentially (leftmost-first), conditioning each
rule choice on a sentence embedding, the previously sampled rule, and the
identity of the non-terminal being expanded.  All K particles for a batch
advance through the recurrence together.
"""

from __future__ import annotations

import csv
import math
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import estimators as est
from .estimators import ParticleSet
from .grammar import (
    Grammar,
    GrammarError,
    ParseTree,
    decision_sequence,
    relaxed_log_likelihood,
    sample_tree,
    to_bracketed,
    yield_sentence,
)
from .nn import RnnCell, init_linear
from .optim import Adam

METHODS = ("ws", "ww", "vimco", "reinforce")


class PcfgParams:
    """Learnable rule probabilities as per-non-terminal logits."""

    def __init__(self, grammar, init="uniform"):
        self.grammar = grammar
        self.logits = {}
        for nt in grammar.non_terminals:
            n = len(grammar.rules[nt])
            if init == "uniform":
                vec = np.zeros(n)
            elif init == "true":
                vec = np.log(grammar.rule_probs(nt))
            else:
                raise ValueError(f"unknown init {init!r}")
            self.logits[nt] = ad.parameter(vec)

    @property
    def params(self):
        return [self.logits[nt] for nt in self.grammar.non_terminals]

    def log_prob_vector(self):
        """Concatenated log rule probabilities in global-rule-id order."""
        return ad.concat(
            [ad.log_softmax(self.logits[nt]) for nt in self.grammar.non_terminals]
        )

    def rule_pmf(self, nt):
        return est.np_softmax(self.logits[nt].data)

    def tree_counts(self, trees):
        counts = np.zeros((len(trees), self.grammar.num_rules))
        for i, tree in enumerate(trees):
            for nt, rule_idx in decision_sequence(tree):
                counts[i, self.grammar.global_rule_id(nt, rule_idx)] += 1.0
        return counts

    def trees_log_prob(self, trees):
        """Differentiable log p(z) for a list of trees; shape (len(trees),)."""
        counts = self.tree_counts(trees)
        vec = ad.reshape(self.log_prob_vector(), (self.grammar.num_rules, 1))
        return ad.reshape(ad.matmul(ad.tensor(counts), vec), (len(trees),))

    def as_grammar(self):
        """Snapshot of the current probabilities as a plain grammar."""
        rules = {}
        for nt in self.grammar.non_terminals:
            pmf = self.rule_pmf(nt)
            rules[nt] = [
                (rhs, float(p)) for (rhs, _), p in zip(self.grammar.rules[nt], pmf)
            ]
        return Grammar(rules, self.grammar.start, terminals=self.grammar.terminals)

    def dream(self, n, rng, max_expansions=50):
        """(tree, sentence) pairs from the current model, parameters detached."""
        g = self.as_grammar()
        trees = [sample_tree(g, rng, max_expansions) for _ in range(n)]
        return trees, [yield_sentence(t) for t in trees]


class _DreamModel:
    """Adapter giving the generic sleep loss an ancestral sampler."""

    def __init__(self, params, max_expansions):
        self.params = params
        self.max_expansions = max_expansions

    def dream(self, n, rng):
        return self.params.dream(n, rng, self.max_expansions)


def production_kl_metric(learned, true_grammar):
    """Mean KL(true rule PMF || learned rule PMF) over non-terminals."""
    total = 0.0
    for nt in true_grammar.non_terminals:
        p = true_grammar.rule_probs(nt)
        if isinstance(learned, Grammar):
            q = learned.rule_probs(nt)
        else:
            q = learned.rule_pmf(nt)
        if len(p) != len(q):
            raise ValueError(f"rule count mismatch for {nt!r}")
        mask = p > 0
        if np.any(q[mask] == 0.0):
            return float("inf")
        total += float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
    return total / len(true_grammar.non_terminals)


class ParseInferenceNet:
    """Amortized parser: sentence encoder plus a decision recurrence.

    Each step feeds [sentence embedding; previous-rule embedding; embedding
    of the non-terminal being expanded] into the recurrence and picks a rule
    from that non-terminal's masked head.  Expansion forcing mirrors the
    generative sampler: past the budget, choices renormalize over the
    fewest-non-terminal rules, and those steps still contribute their
    (renormalized) log-probabilities.
    """

    def __init__(self, grammar, rng, word_dim=16, sent_hidden=64, dec_hidden=64, emb_dim=16):
        self.grammar = grammar
        v = len(grammar.terminals)
        r = grammar.num_rules
        n_nt = len(grammar.non_terminals)
        self.word_emb = ad.parameter(rng.normal(0.0, 0.5, size=(v, word_dim)))
        self.sent_rnn = RnnCell(word_dim, sent_hidden, rng)
        self.dec_rnn = RnnCell(sent_hidden + 2 * emb_dim, dec_hidden, rng)
        self.rule_emb = ad.parameter(rng.normal(0.0, 0.5, size=(r + 1, emb_dim)))
        self.addr_emb = ad.parameter(rng.normal(0.0, 0.5, size=(n_nt, emb_dim)))
        # per-non-terminal heads, stored stacked: each non-terminal owns the
        # block of output columns holding its rule logits
        self.head_w, self.head_b = init_linear(rng, dec_hidden, r)
        self._start_rule = r
        # per-non-terminal gather patterns: global rule columns padded to a
        # common width, an additive mask hiding the padding, and (for the
        # forcing regime) the same restricted to the termination rules
        width = max(len(grammar.rules[nt]) for nt in grammar.non_terminals)
        self._width = width
        self._cols = np.zeros((n_nt, width), dtype=int)
        self._mask = np.full((n_nt, width), -1e9)
        self._forced_cols = np.zeros((n_nt, width), dtype=int)
        self._forced_mask = np.full((n_nt, width), -1e9)
        self._pos = {}
        self._forced_pos = {}
        self._n_cols = np.zeros(n_nt, dtype=int)
        self._n_forced_cols = np.zeros(n_nt, dtype=int)
        for nt in grammar.non_terminals:
            i = grammar.nt_index[nt]
            n_rules = len(grammar.rules[nt])
            cols = grammar.rule_offsets[nt] + np.arange(n_rules)
            self._cols[i, :n_rules] = cols
            self._cols[i, n_rules:] = cols[0]
            self._mask[i, :n_rules] = 0.0
            self._n_cols[i] = n_rules
            allowed = grammar.forcing_rule_indices(nt)
            fcols = grammar.rule_offsets[nt] + allowed
            self._forced_cols[i, : len(fcols)] = fcols
            self._forced_cols[i, len(fcols):] = fcols[0]
            self._forced_mask[i, : len(fcols)] = 0.0
            self._n_forced_cols[i] = len(fcols)
            self._pos[nt] = {int(ri): p for p, ri in enumerate(range(n_rules))}
            self._forced_pos[nt] = {int(ri): p for p, ri in enumerate(allowed)}

    @property
    def params(self):
        ps = [self.word_emb, self.rule_emb, self.addr_emb]
        ps += self.sent_rnn.params + self.dec_rnn.params
        ps += [self.head_w, self.head_b]
        return ps

    def encode_sentences(self, sentences):
        """Batch-encode ragged sentences; returns (n, sent_hidden)."""
        n = len(sentences)
        ids = []
        for s in sentences:
            try:
                ids.append([self.grammar.terminal_index[w] for w in s])
            except KeyError as exc:
                raise KeyError(f"word {exc.args[0]!r} is not a grammar terminal") from exc
        max_len = max((len(s) for s in ids), default=0)
        h = self.sent_rnn.initial_state(n)
        for t in range(max_len):
            wid = np.array([s[t] if t < len(s) else 0 for s in ids])
            mask = np.array([1.0 if t < len(s) else 0.0 for s in ids])[:, None]
            x = ad.take_rows(self.word_emb, wid)
            h_new = self.sent_rnn.step(x, h)
            m = np.broadcast_to(mask, h_new.shape)
            h = h_new * ad.tensor(m) + h * ad.tensor(1.0 - m)
        return h

    def propose(self, sentence, k, rng, max_expansions):
        """Sample K derivations for one sentence; returns (trees, log q (k,))."""
        trees, log_q = self.propose_multi([sentence], k, rng, max_expansions)
        return trees[0], log_q

    def propose_multi(self, sentences, k, rng, max_expansions):
        """K derivations per sentence in one batched pass.

        Returns (nested trees, log q of shape (len(sentences) * k,)) with
        particle rows ordered sentence-major.
        """
        b = len(sentences)
        embs = self.encode_sentences(sentences)
        rows = ad.take_rows(embs, np.repeat(np.arange(b), k))
        flat_trees, log_q = self._derive(rows, None, rng, max_expansions)
        return [flat_trees[i * k : (i + 1) * k] for i in range(b)], log_q

    def score(self, sentences, trees, max_expansions):
        """Replay given derivations under matching forcing; log q per tree."""
        embs = self.encode_sentences(sentences)
        _, log_q = self._derive(embs, trees, None, max_expansions)
        return log_q

    def log_prob(self, z, x, max_expansions=50):
        return self.score(x, z, max_expansions)

    def _derive(self, sent_rows, trees_in, rng, max_expansions):
        if max_expansions < 1:
            raise ValueError("max_expansions must be >= 1")
        g = self.grammar
        n = sent_rows.shape[0]
        replay = trees_in is not None
        if replay:
            seqs = [decision_sequence(t) for t in trees_in]
            seq_lens = np.array([len(s) for s in seqs])
            pos = np.zeros(n, dtype=int)
            roots = list(trees_in)
        else:
            roots = [ParseTree(g.start, -1) for _ in range(n)]
            stacks = [[(g.start, root)] for root in roots]
            forced_any = np.zeros(n, dtype=bool)
        counts = np.zeros(n, dtype=int)
        prev_rule = np.full(n, self._start_rule, dtype=int)
        h = self.dec_rnn.initial_state(n)
        rnn_bias = ad.broadcast_to(
            ad.reshape(self.dec_rnn.b, (1, self.dec_rnn.hidden_size)),
            (n, self.dec_rnn.hidden_size),
        )
        head_bias = ad.broadcast_to(
            ad.reshape(self.head_b, (1, g.num_rules)), (n, g.num_rules)
        )
        log_q = ad.tensor(np.zeros(n))
        guard = 20 * max_expansions + 1000
        steps = 0
        while True:
            if replay:
                alive = pos < seq_lens
            else:
                alive = np.fromiter((bool(st) for st in stacks), bool, n)
            alive_idx = np.flatnonzero(alive)
            if alive_idx.size == 0:
                break
            steps += 1
            if steps > guard:
                # a particle is cycling through forcing rules that cannot
                # shrink its stack (possible when the minimal-non-terminal
                # rule set still contains recursion)
                raise GrammarError("expansion budget exhausted with no forcible termination")
            nt_ids = np.zeros(n, dtype=int)
            for i in alive_idx:
                sym = seqs[i][pos[i]][0] if replay else stacks[i][-1][0]
                nt_ids[i] = g.nt_index[sym]
            inp = ad.concat(
                [
                    sent_rows,
                    ad.take_rows(self.rule_emb, prev_rule),
                    ad.take_rows(self.addr_emb, nt_ids),
                ],
                axis=1,
            )
            h = ad.tanh(
                ad.matmul(inp, self.dec_rnn.w_in)
                + ad.matmul(h, self.dec_rnn.w_h)
                + rnn_bias
            )
            logits_full = ad.matmul(h, self.head_w) + head_bias
            forced = counts >= max_expansions
            col_rows = np.where(forced[:, None], self._forced_cols[nt_ids], self._cols[nt_ids])
            mask_rows = np.where(forced[:, None], self._forced_mask[nt_ids], self._mask[nt_ids])
            lsm = ad.log_softmax(
                ad.take_along_rows(logits_full, col_rows) + ad.tensor(mask_rows)
            )
            choice = np.zeros(n, dtype=int)
            if replay:
                for i in alive_idx:
                    nt, ridx = seqs[i][pos[i]]
                    table = self._forced_pos[nt] if forced[i] else self._pos[nt]
                    if ridx not in table:
                        raise GrammarError(
                            "replayed tree is incompatible with the forcing budget"
                        )
                    choice[i] = table[ridx]
            else:
                probs = np.exp(lsm.data[alive_idx])
                u = rng.random(alive_idx.size)
                cum = np.cumsum(probs, axis=1)
                n_real = np.where(
                    forced[alive_idx],
                    self._n_forced_cols[nt_ids[alive_idx]],
                    self._n_cols[nt_ids[alive_idx]],
                )
                choice[alive_idx] = np.minimum(
                    (u[:, None] > cum).sum(axis=1), n_real - 1
                )
            lp = ad.reshape(
                ad.take_along_rows(lsm, choice[:, None]), (n,)
            )
            log_q = log_q + lp * ad.tensor(alive.astype(float))
            chosen_cols = col_rows[np.arange(n), choice]
            for i in alive_idx:
                rule_global = int(chosen_cols[i])
                nt = g.non_terminals[nt_ids[i]]
                rule_idx = rule_global - g.rule_offsets[nt]
                counts[i] += 1
                prev_rule[i] = rule_global
                if replay:
                    pos[i] += 1
                else:
                    if forced[i]:
                        forced_any[i] = True
                    _, node = stacks[i].pop()
                    node.rule_index = rule_idx
                    pending = []
                    for s in g.rules[nt][rule_idx][0]:
                        if g.is_non_terminal(s):
                            child = ParseTree(s, -1)
                            node.children.append(child)
                            pending.append((s, child))
                        else:
                            node.children.append(s)
                    stacks[i].extend(reversed(pending))
        if not replay:
            for i, root in enumerate(roots):
                root.forced = bool(forced_any[i])
        return roots, log_q


def sleep_loss_proxy_metric(net, true_grammar, num_samples, rng, max_expansions=50):
    """Mean negative inference log-probability on pairs dreamed from the
    true grammar; equals the amortization KL up to the conditional entropy."""
    if num_samples < 1:
        raise ValueError("need at least one sample")
    trees = [sample_tree(true_grammar, rng, max_expansions) for _ in range(num_samples)]
    sentences = [yield_sentence(t) for t in trees]
    log_q = net.score(sentences, trees, max_expansions)
    return float(-np.mean(log_q.data))


def posterior_dump(net, sentence, num_samples, rng, max_expansions=50):
    """Sampled derivations for one sentence, aggregated by frequency."""
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    trees, _ = net.propose(words, num_samples, rng, max_expansions)
    counter = Counter(to_bracketed(t) for t in trees)
    return counter.most_common()


def write_posterior_dump(lines, num_samples, path):
    with open(path, "w") as fh:
        for bracketed, count in lines:
            fh.write(f"{count}\t{count / num_samples:.6f}\t{bracketed}\n")


@dataclass
class PcfgMetricsRow:
    iteration: int
    method: str
    k: int
    seed: int
    production_kl: float
    sleep_loss_proxy: float
    wallclock_s: float


PCFG_CSV_HEADER = [
    "iteration",
    "method",
    "K",
    "seed",
    "production_kl",
    "sleep_loss_proxy",
    "wallclock_s",
]


def write_pcfg_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PCFG_CSV_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.iteration,
                    r.method,
                    r.k,
                    r.seed,
                    repr(r.production_kl),
                    repr(r.sleep_loss_proxy),
                    repr(r.wallclock_s),
                ]
            )


class PcfgTrainer:
    """One (method, K, seed) run on the bundled grammar."""

    def __init__(
        self,
        method,
        k,
        seed,
        iterations=3000,
        batch_size=2,
        max_expansions=50,
        data_max_expansions=200,
        sleep_proxy_samples=200,
        fixed_corpus_size=0,
        lr=1e-3,
    ):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        if k < 1 or (method == "vimco" and k < 2):
            raise ValueError(f"invalid particle count {k} for method {method!r}")
        from .config import derive_rng
        from .grammar import load_astronomers

        self.method = method
        self.k = k
        self.seed = seed
        self.iterations = iterations
        self.batch_size = batch_size
        self.max_expansions = max_expansions
        self.data_max_expansions = data_max_expansions
        self.sleep_proxy_samples = sleep_proxy_samples

        self.rng_data = derive_rng(seed, method, k, "data")
        self.rng_proposal = derive_rng(seed, method, k, "proposal")
        self.rng_sleep = derive_rng(seed, method, k, "sleep")
        self.rng_eval = derive_rng(seed, method, k, "eval")
        rng_init = derive_rng(seed, method, k, "init")
        self.stalled = False
        self.retained = True

        self.true_grammar = load_astronomers()
        self.params = PcfgParams(self.true_grammar, init="uniform")
        self.net = ParseInferenceNet(self.true_grammar, rng_init)
        self.opt_theta = Adam(self.params.params, lr=lr)
        self.opt_phi = Adam(self.net.params, lr=lr)
        self.corpus = None
        if fixed_corpus_size:
            self.corpus = [
                yield_sentence(sample_tree(self.true_grammar, self.rng_data, data_max_expansions))
                for _ in range(fixed_corpus_size)
            ]
            self._corpus_pos = 0

    def _next_batch(self):
        if self.corpus is not None:
            out = []
            for _ in range(self.batch_size):
                out.append(self.corpus[self._corpus_pos % len(self.corpus)])
                self._corpus_pos += 1
            return out
        return [
            yield_sentence(
                sample_tree(self.true_grammar, self.rng_data, self.data_max_expansions)
            )
            for _ in range(self.batch_size)
        ]

    def _loss_on_tape(self, sentences, rng, rng_sleep=None):
        if rng_sleep is None:
            rng_sleep = rng
        b = len(sentences)
        trees, log_q_flat = self.net.propose_multi(
            sentences, self.k, rng, self.max_expansions
        )
        flat_trees = [t for group in trees for t in group]
        log_pz = self.params.trees_log_prob(flat_trees)
        log_lik = np.array(
            [
                relaxed_log_likelihood(sent, t)
                for sent, group in zip(sentences, trees)
                for t in group
            ]
        )
        log_q = ad.reshape(log_q_flat, (b, self.k))
        log_joint = ad.reshape(log_pz + ad.tensor(log_lik), (b, self.k))
        ps = ParticleSet(trees, log_q, log_joint)
        if self.method == "reinforce":
            return -est.reinforce_surrogate(ps)
        if self.method == "vimco":
            return -est.vimco_surrogate(ps)
        loss = -est.wake_theta_surrogate(ps)
        if self.method == "ww":
            return loss + est.wake_phi_loss(ps)
        dream_model = _DreamModel(self.params, self.max_expansions)
        return loss + est.sleep_phi_loss(dream_model, self.net, self.k * b, rng_sleep)

    def step(self, sentences):
        with ad.Tape() as tape:
            loss = self._loss_on_tape(sentences, self.rng_proposal, rng_sleep=self.rng_sleep)
        tape.backward(loss)
        theta_grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params.params
        ]
        phi_grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.net.params
        ]
        self.opt_theta.step(theta_grads)
        self.opt_phi.step(phi_grads)

    def metrics_row(self, iteration, start_time):
        return PcfgMetricsRow(
            iteration=iteration,
            method=self.method,
            k=self.k,
            seed=self.seed,
            production_kl=production_kl_metric(self.params, self.true_grammar),
            sleep_loss_proxy=sleep_loss_proxy_metric(
                self.net,
                self.true_grammar,
                self.sleep_proxy_samples,
                self.rng_eval,
                self.max_expansions,
            ),
            wallclock_s=time.monotonic() - start_time,
        )

    def run(self, cadence=100, wallclock_max_s=None):
        """Train; returns metrics rows.  ``self.stalled`` records a
        tree-length blowup (the run is capped there and retained)."""
        self.stalled = False
        self.retained = True
        rows = []
        start = time.monotonic()
        for t in range(self.iterations):
            if t % cadence == 0:
                rows.append(self.metrics_row(t, start))
            if wallclock_max_s is not None and time.monotonic() - start > wallclock_max_s:
                self.retained = False
                if not rows or rows[-1].iteration != t:
                    rows.append(self.metrics_row(t, start))
                return rows
            try:
                self.step(self._next_batch())
            except GrammarError:
                self.stalled = True
                self.retained = False
                if not rows or rows[-1].iteration != t:
                    rows.append(self.metrics_row(t, start))
                return rows
        rows.append(self.metrics_row(self.iterations, start))
        return rows


def train_pcfg(
    method,
    k,
    seed,
    iterations=3000,
    batch_size=2,
    max_expansions=50,
    data_max_expansions=200,
    sleep_proxy_samples=200,
    fixed_corpus_size=0,
    cadence=100,
    lr=1e-3,
    wallclock_max_s=None,
):
    """Train one configuration and return its metrics rows."""
    trainer = PcfgTrainer(
        method,
        k,
        seed,
        iterations=iterations,
        batch_size=batch_size,
        max_expansions=max_expansions,
        data_max_expansions=data_max_expansions,
        sleep_proxy_samples=sleep_proxy_samples,
        fixed_corpus_size=fixed_corpus_size,
        lr=lr,
    )
    return trainer.run(cadence=cadence, wallclock_max_s=wallclock_max_s)
