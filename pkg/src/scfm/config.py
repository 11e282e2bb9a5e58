"""Experiment configuration, validation, and derived RNG streams."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, asdict

import numpy as np

GMM_METHODS = ("ws", "ww", "delta-ww", "reinforce", "vimco", "relax", "concrete")
PCFG_METHODS = ("ws", "ww", "vimco", "reinforce")

_METHOD_IDS = {m: i for i, m in enumerate(GMM_METHODS)}
_PURPOSE_IDS = {
    "init": 0,
    "data": 1,
    "proposal": 2,
    "sleep": 3,
    "gradstd": 4,
    "testset": 5,
    "dream": 6,
    "eval": 7,
}
_STREAM_SALT = 0x5CF3


def derive_rng(seed, method, k, purpose):
    """Independent generator for (seed, method, K, purpose); no two purposes
    share a stream."""
    if method not in _METHOD_IDS:
        raise ValueError(f"unknown method {method!r}")
    if purpose not in _PURPOSE_IDS:
        raise ValueError(f"unknown stream purpose {purpose!r}")
    ss = np.random.SeedSequence(
        [_STREAM_SALT, int(seed), _METHOD_IDS[method], int(k), _PURPOSE_IDS[purpose]]
    )
    return np.random.default_rng(ss)


@dataclass
class ExperimentConfig:
    """Everything one benchmark run (or sweep) needs, validated up front."""

    benchmark: str = "gmm"
    methods: list = field(default_factory=lambda: ["ww"])
    ks: list = field(default_factory=lambda: [2])
    seeds: list = field(default_factory=lambda: [0])
    iterations: int = 50_000
    cadence: int = 100
    wallclock_max_s: float | None = None
    out_dir: str = "runs"
    workers: int = 1
    # gmm knobs
    c: int = 20
    delta: float = 0.2
    init_mode: str = "adverse"
    temp_start: float = 3.0
    temp_end: float = 0.5
    gmm_batch_size: int = 100
    grad_std_repeats: int = 10
    # pcfg knobs
    max_expansions: int = 50
    pcfg_batch_size: int = 2
    data_max_expansions: int = 200
    sleep_proxy_samples: int = 200
    fixed_corpus_size: int = 0  # 0 streams fresh sentences every batch
    posterior_dump_sentence: str = "astronomers saw stars with telescopes"
    posterior_dump_samples: int = 200

    def validate(self):
        if self.benchmark not in ("gmm", "pcfg", "check"):
            raise ValueError(f"unknown benchmark {self.benchmark!r}")
        allowed = GMM_METHODS if self.benchmark == "gmm" else PCFG_METHODS
        for m in self.methods:
            if self.benchmark != "check" and m not in allowed:
                raise ValueError(f"method {m!r} not valid for benchmark {self.benchmark!r}")
        for k in self.ks:
            if k < 1:
                raise ValueError("particle counts must be >= 1")
            if "vimco" in self.methods and k < 2:
                raise ValueError("vimco needs K >= 2")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.iterations < 0 or self.cadence < 1:
            raise ValueError("iterations must be >= 0 and cadence >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.init_mode not in ("adverse", "uniform"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.temp_start <= 0 or self.temp_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.c < 2:
            raise ValueError("component count must be >= 2")
        if self.max_expansions < 1:
            raise ValueError("max_expansions must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self

    def to_ini(self):
        parser = configparser.ConfigParser()
        parser["experiment"] = {
            "benchmark": self.benchmark,
            "methods": ",".join(self.methods),
            "ks": ",".join(str(k) for k in self.ks),
            "seeds": ",".join(str(s) for s in self.seeds),
            "iterations": str(self.iterations),
            "cadence": str(self.cadence),
            "wallclock_max_s": "" if self.wallclock_max_s is None else repr(self.wallclock_max_s),
            "out_dir": self.out_dir,
            "workers": str(self.workers),
        }
        parser["gmm"] = {
            "c": str(self.c),
            "delta": repr(self.delta),
            "init_mode": self.init_mode,
            "temp_start": repr(self.temp_start),
            "temp_end": repr(self.temp_end),
            "batch_size": str(self.gmm_batch_size),
            "grad_std_repeats": str(self.grad_std_repeats),
        }
        parser["pcfg"] = {
            "max_expansions": str(self.max_expansions),
            "batch_size": str(self.pcfg_batch_size),
            "data_max_expansions": str(self.data_max_expansions),
            "sleep_proxy_samples": str(self.sleep_proxy_samples),
            "fixed_corpus_size": str(self.fixed_corpus_size),
            "posterior_dump_sentence": self.posterior_dump_sentence,
            "posterior_dump_samples": str(self.posterior_dump_samples),
        }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def as_dict(self):
        return asdict(self)


def _split_list(raw, conv):
    return [conv(tok.strip()) for tok in raw.split(",") if tok.strip()]


def load_config(path):
    """Parse the sectioned key/value config file into an ExperimentConfig."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = ExperimentConfig()
    if "experiment" in parser:
        sec = parser["experiment"]
        cfg.benchmark = sec.get("benchmark", cfg.benchmark)
        if "methods" in sec:
            cfg.methods = _split_list(sec["methods"], str)
        if "ks" in sec:
            cfg.ks = _split_list(sec["ks"], int)
        if "seeds" in sec:
            cfg.seeds = _split_list(sec["seeds"], int)
        cfg.iterations = sec.getint("iterations", cfg.iterations)
        cfg.cadence = sec.getint("cadence", cfg.cadence)
        raw_cap = sec.get("wallclock_max_s", "")
        cfg.wallclock_max_s = float(raw_cap) if raw_cap else None
        cfg.out_dir = sec.get("out_dir", cfg.out_dir)
        cfg.workers = sec.getint("workers", cfg.workers)
    if "gmm" in parser:
        sec = parser["gmm"]
        cfg.c = sec.getint("c", cfg.c)
        cfg.delta = sec.getfloat("delta", cfg.delta)
        cfg.init_mode = sec.get("init_mode", cfg.init_mode)
        cfg.temp_start = sec.getfloat("temp_start", cfg.temp_start)
        cfg.temp_end = sec.getfloat("temp_end", cfg.temp_end)
        cfg.gmm_batch_size = sec.getint("batch_size", cfg.gmm_batch_size)
        cfg.grad_std_repeats = sec.getint("grad_std_repeats", cfg.grad_std_repeats)
    if "pcfg" in parser:
        sec = parser["pcfg"]
        cfg.max_expansions = sec.getint("max_expansions", cfg.max_expansions)
        cfg.pcfg_batch_size = sec.getint("batch_size", cfg.pcfg_batch_size)
        cfg.data_max_expansions = sec.getint("data_max_expansions", cfg.data_max_expansions)
        cfg.sleep_proxy_samples = sec.getint("sleep_proxy_samples", cfg.sleep_proxy_samples)
        cfg.fixed_corpus_size = sec.getint("fixed_corpus_size", cfg.fixed_corpus_size)
        cfg.posterior_dump_sentence = sec.get(
            "posterior_dump_sentence", cfg.posterior_dump_sentence
        )
        cfg.posterior_dump_samples = sec.getint(
            "posterior_dump_samples", cfg.posterior_dump_samples
        )
    return cfg.validate()
