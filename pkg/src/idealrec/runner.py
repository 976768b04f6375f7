"""Experiment orchestration: config, stages, artifact directory and manifest."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import kernel as K
from .data import DriftConfig, StepSet, drift_steps, kcore_filter, load_interactions, steps_from_events, \
    steps_to_interactions, synth_drift_stream
from .generator import TrainConfig, train_joint
from .mapper import STRATEGIES, DmConfig, DmModel, make_dm_batch, train_dm, uncertainty_batch
from .metrics import emit_curves, emit_revenue
from .models import BackboneConfig, pack_sequences
from .mrd import MrdConfig, MrdDetector, balance, build_mrd_dataset, train_mrd
from .policy import Policy, lof_fit, lof_scores, svdd_fit, svdd_scores
from .simulator import MrsScorer, ReplayContext, SweepEntry, calibrate_mrs, curve_row, frequency_sweep, \
    revenue_report, run_replay, write_step_log

log = logging.getLogger("idealrec")

BASE_POLICIES = ("always", "never", "random", "lof", "svdd")
IDEAL_POLICIES = ("ideal", "ideal-no-dm", "ideal-cl-nu", "ideal-cl-mu", "ideal-rl-nu", "ideal-rl-mu")
ALL_POLICIES = BASE_POLICIES + IDEAL_POLICIES
DEFAULT_POLICIES = ("always", "never", "random", "ideal", "ideal-no-dm", "ideal-cl-mu", "ideal-rl-nu",
                    "lof", "svdd")
DEFAULT_BUDGETS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


@dataclass
class ExperimentConfig:
    # data
    data_source: str = "drift"
    data_path: str = ""
    data_kcore: int = 0
    drift_users: int = 200
    drift_items: int = 400
    drift_domains: int = 4
    drift_switch_prob: float = 0.05
    drift_length: int = 100
    train_ratio: int = 4
    test_ratio: int = 49
    split_history: float = 0.4
    split_calibration: float = 0.3
    # backbone and generator
    model_dim: int = 32
    model_encoder: str = "mean-pool-attention"
    model_max_len: int = 30
    train_epochs: int = 6
    train_batch_size: int = 256
    train_lr: float = 0.003
    train_optimizer: str = "adam"
    # detector
    mrd_lags: str = "0,1,2,4,8,16"
    mrd_balance: float = 3.0
    mrd_hidden: int = 32
    mrd_epochs: int = 4
    mrd_lr: float = 0.001
    mrd_write_dataset: bool = True
    # distribution mapper
    dm_latent: int = 64
    dm_hidden: int = 32
    dm_beta: float = 0.1
    dm_samples: int = 10
    dm_strategy: str = "cl+nu"
    dm_epochs: int = 3
    dm_lr: float = 0.001
    # policies and sweep
    policy_list: tuple[str, ...] = DEFAULT_POLICIES
    policy_mrs_score: str = "relative"
    policy_lof_k: int = 10
    policy_lof_reference: int = 1000
    policy_svdd_quantile: float = 0.9
    sweep_budgets: tuple[float, ...] = DEFAULT_BUDGETS
    sweep_seeds: tuple[int, ...] = (0,)
    revenue_group_size: int = 20
    revenue_policy: str = "ideal"
    revenue_budget: float = 0.0
    out: str = "runs/default"

    # ---- parsing

    @staticmethod
    def key_of(name: str) -> str:
        section, _, rest = name.partition("_")
        return f"{section}.{rest}" if rest else section

    @classmethod
    def keys(cls) -> dict[str, Any]:
        return {cls.key_of(f.name): f for f in fields(cls)}

    @classmethod
    def parse(cls, text: str, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        """Flat ``section.key = value`` lines; '#' starts a comment."""
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            k, v = (p.strip() for p in line.split("=", 1))
            raw[k] = v
        raw.update(overrides or {})
        known = cls.keys()
        values = {}
        for k, v in raw.items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            f = known[k]
            try:
                values[f.name] = _convert(f, v)
            except ValueError as exc:
                raise ConfigError(f"{k}: cannot parse {v!r} ({exc})") from None
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        text = Path(path).read_text() if path else ""
        return cls.parse(text, overrides)

    def dump(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{self.key_of(f.name)} = {v}")
        return "\n".join(out) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()

    # ---- derived

    def backbone(self, vocab: int) -> BackboneConfig:
        return BackboneConfig(vocab, self.model_dim, self.model_encoder, self.model_max_len)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.train_epochs, self.train_batch_size, self.train_lr, self.train_optimizer, seed)

    def mrd_config(self, seed: int) -> MrdConfig:
        return MrdConfig(self.mrd_hidden, self.mrd_epochs, self.train_batch_size, self.mrd_lr, "adam", seed,
                         self.mrd_balance)

    def dm_config(self, strategy: str, seed: int) -> DmConfig:
        return DmConfig.from_strategy(strategy, latent=self.dm_latent, hidden=self.dm_hidden, beta=self.dm_beta,
                                      samples=self.dm_samples, epochs=self.dm_epochs,
                                      batch_size=self.train_batch_size, lr=self.dm_lr, seed=seed)

    def lag_policy(self):
        return "all" if self.mrd_lags.strip() == "all" else _ints(self.mrd_lags)


def _convert(f, v: str):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if "tuple[float" in t:
        return _floats(v)
    if "tuple[int" in t:
        return _ints(v)
    if "tuple[str" in t:
        return _names(v)
    if t == "bool":
        if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError("expected a boolean")
        return v.lower() in ("true", "1", "yes")
    if t == "int":
        return int(v)
    if t == "float":
        return float(v)
    return v


def validate(cfg: ExperimentConfig) -> list[str]:
    """Cross-field diagnostics; an empty list means the config is usable."""
    d = []
    if cfg.data_source not in ("drift", "path"):
        d.append(f"data.source: unknown source {cfg.data_source!r} (drift or path)")
    if cfg.data_source == "path" and not cfg.data_path:
        d.append("data.path: required when data.source = path")
    if cfg.data_source == "drift":
        try:
            DriftConfig(cfg.drift_users, cfg.drift_items, cfg.drift_domains, cfg.drift_switch_prob,
                        cfg.drift_length, 0)
        except ValueError as exc:
            d.append(f"drift: {exc}")
    for name in cfg.policy_list:
        if name not in ALL_POLICIES:
            d.append(f"policy.list: unknown policy {name!r}")
    if not cfg.policy_list:
        d.append("policy.list: empty")
    for f in cfg.sweep_budgets:
        if not 0.0 <= f <= 1.0:
            d.append(f"sweep.budgets: budget {f} out of [0,1]")
    if list(cfg.sweep_budgets) != sorted(cfg.sweep_budgets):
        d.append("sweep.budgets: must be sorted ascending")
    if not cfg.sweep_seeds:
        d.append("sweep.seeds: at least one seed required")
    if cfg.dm_samples < 1:
        d.append("dm.samples: sampling count n must be >= 1")
    if cfg.dm_beta < 0:
        d.append("dm.beta: must be >= 0")
    if cfg.dm_strategy not in STRATEGIES:
        d.append(f"dm.strategy: unknown strategy {cfg.dm_strategy!r}")
    uses_mu = (cfg.dm_strategy.endswith("mu") and any(p == "ideal" for p in cfg.policy_list)) or any(
        p.endswith("-mu") for p in cfg.policy_list)
    if uses_mu and cfg.mrd_epochs < 1:
        d.append("mrd.epochs: MU uncertainty needs a trained detector stage (epochs >= 1)")
    if cfg.model_dim < 1 or cfg.model_max_len < 1:
        d.append("model: dim and max_len must be >= 1")
    if cfg.model_encoder not in ("mean-pool-attention", "recurrent"):
        d.append(f"model.encoder: unknown encoder {cfg.model_encoder!r}")
    if not (0 < cfg.split_history < 1 and 0 < cfg.split_calibration < 1
            and cfg.split_history + cfg.split_calibration < 1):
        d.append("split: history and calibration fractions must be positive and sum below 1")
    if cfg.train_ratio < 1 or cfg.test_ratio < 1:
        d.append("train.ratio / test.ratio: need at least one negative per positive")
    if cfg.revenue_group_size < 1:
        d.append("revenue.group_size: must be >= 1")
    if cfg.revenue_policy not in cfg.policy_list or cfg.revenue_policy in ("always", "never", "random", "lof", "svdd"):
        if cfg.revenue_policy not in IDEAL_POLICIES:
            d.append(f"revenue.policy: must name a detector policy, got {cfg.revenue_policy!r}")
    if not 0.0 <= cfg.revenue_budget <= 1.0:
        d.append(f"revenue.budget: budget {cfg.revenue_budget} out of [0,1]")
    if cfg.mrd_lags.strip() != "all":
        try:
            lags = _ints(cfg.mrd_lags)
            if not lags or min(lags) < 0:
                d.append("mrd.lags: need non-negative lags")
        except ValueError:
            d.append(f"mrd.lags: cannot parse {cfg.mrd_lags!r}")
    if cfg.policy_mrs_score not in ("relative", "absolute"):
        d.append(f"policy.mrs_score: unknown score {cfg.policy_mrs_score!r} (relative or absolute)")
    if cfg.train_optimizer not in ("sgd", "adam"):
        d.append(f"train.optimizer: unknown optimizer {cfg.train_optimizer!r}")
    return d


def check(cfg: ExperimentConfig) -> None:
    diags = validate(cfg)
    if diags:
        raise ConfigError("invalid config:\n  " + "\n  ".join(diags))


# ---------------------------------------------------------------- data split

@dataclass
class SplitData:
    vocab: int
    history: list[StepSet]
    calibration: list[StepSet]
    evaluation: list[StepSet]


def _cut(s: StepSet, lo: int, hi: int) -> StepSet:
    return StepSet(s.user, s.steps[lo:hi], s.prefixes[lo:hi], s.candidates[lo:hi], s.labels[lo:hi])


def prepare_data(cfg: ExperimentConfig, seed: int) -> SplitData:
    """Per-user chronological split into history / calibration / evaluation windows."""
    if cfg.data_source == "drift":
        dc = DriftConfig(cfg.drift_users, cfg.drift_items, cfg.drift_domains, cfg.drift_switch_prob,
                         cfg.drift_length, seed)
        data = synth_drift_stream(dc)
        train = drift_steps(data, 1, dc.length, cfg.train_ratio, cfg.model_max_len, seed)
        test = drift_steps(data, 1, dc.length, cfg.test_ratio, cfg.model_max_len, seed + 1_000_003)
        vocab = dc.items
    else:
        events = load_interactions(cfg.data_path)
        if cfg.data_kcore:
            events = kcore_filter(events, cfg.data_kcore)
        vocab = max(e.item for e in events) + 1
        train = steps_from_events(events, cfg.train_ratio, cfg.model_max_len, seed)
        test = steps_from_events(events, cfg.test_ratio, cfg.model_max_len, seed + 1_000_003)
    hist, cal, ev = [], [], []
    for a, b in zip(train, test):
        n = len(a.steps)
        k1 = int(round(n * cfg.split_history))
        k2 = int(round(n * (cfg.split_history + cfg.split_calibration)))
        if k1 < 1 or k2 - k1 < 2 or n - k2 < 2:
            continue
        hist.append(_cut(a, 0, k1))
        cal.append(_cut(b, k1, k2))
        ev.append(_cut(b, k2, n))
    if not hist:
        raise ValueError("no user has enough steps for a history/calibration/evaluation split")
    return SplitData(vocab, hist, cal, ev)


# ---------------------------------------------------------------- per-seed pipeline

@dataclass
class SeedResult:
    rows: list[dict]
    revenue_rows: list[dict]
    revenue_skipped: list[int]
    artifacts: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, StageError):
            raise StageError(self.name, ev) from ev
        return False


def _strategy_of(policy: str, cfg: ExperimentConfig) -> str | None:
    if policy == "ideal":
        return cfg.dm_strategy
    if policy == "ideal-no-dm":
        return None
    return policy[len("ideal-"):].replace("-", "+")


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None, stop_after: str | None = None) -> SeedResult:
    """Train every component for one seed, sweep budgets and compute revenue."""
    timings: dict[str, float] = {}
    res = SeedResult([], [], [], timings=timings)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def save(name: str, store: K.ParamStore):
        if out is not None:
            K.save_checkpoint(store, out / name)
            res.artifacts[name] = str(out / name)
        res.checksums[name] = store.checksum()

    with _Stage("data", timings):
        split = prepare_data(cfg, seed)
        bb_cfg = cfg.backbone(split.vocab)
    with _Stage("train", timings):
        history = steps_to_interactions(split.history)
        bundle = train_joint(history, bb_cfg, cfg.train_config(seed))
        save("bundle.ckpt", bundle.params)
    if stop_after == "train":
        return res

    with _Stage("build-mrd", timings):
        full = build_mrd_dataset(split.history, bundle, cfg.lag_policy())
        ds = balance(full, cfg.mrd_balance, K.Rng([seed, 61]))
        hist_enc = bundle.encode_array(pack_sequences(ds.seqs, bb_cfg.max_len, bb_cfg.vocab_size))
        prev_enc = bundle.encode_array(pack_sequences(ds.prev_seqs, bb_cfg.max_len, bb_cfg.vocab_size))
        if out is not None and cfg.mrd_write_dataset:
            ds.write_tsv(out / "mrd_dataset.tsv")
            res.artifacts["mrd_dataset.tsv"] = str(out / "mrd_dataset.tsv")
    if stop_after == "build-mrd":
        return res

    ideal_names = [p for p in cfg.policy_list if p.startswith("ideal")]
    if cfg.revenue_policy not in ideal_names:
        ideal_names.append(cfg.revenue_policy)
    strategies = sorted({s for s in (_strategy_of(p, cfg) for p in ideal_names) if s is not None})

    with _Stage("train-detector", timings):
        base = train_mrd(ds, bundle, False, cfg.mrd_config(seed), encodings=hist_enc)
        save("mrd_base.ckpt", base.params)
        dms: dict[str, DmModel] = {}
        detectors: dict[str, MrdDetector] = {}
        dm_batch = make_dm_batch(bundle, [r.seq for r in history], [r.item for r in history],
                                 [r.label for r in history])
        trained_dm: dict[str, DmModel] = {}
        for strat in strategies:
            dcfg = cfg.dm_config(strat, seed)
            key = dcfg.loss
            if key not in trained_dm:
                trained_dm[key] = train_dm(bundle, dm_batch, dcfg)
                save(f"dm_{key}.ckpt", trained_dm[key].params)
            dm = DmModel(trained_dm[key].params, dcfg, bundle, trained=True)
            dms[strat] = dm
            u_seq = uncertainty_batch(dm, ds.seqs, ds.prev_seqs, K.Rng([seed, 71, len(dms)]), base,
                                      encodings=hist_enc, prev_encodings=prev_enc)
            ds_u = ds.subset(np.arange(len(ds)))
            ds_u.uncertainty = u_seq[ds.cur]
            detectors[strat] = train_mrd(ds_u, bundle, True, cfg.mrd_config(seed), encodings=hist_enc)
            save(f"mrd_{strat.replace('+', '_')}.ckpt", detectors[strat].params)
    if stop_after == "train-detector":
        return res

    with _Stage("sweep", timings):
        cal = ReplayContext(bundle, split.calibration)
        ev = ReplayContext(bundle, split.evaluation)
        scorers: dict[str, tuple[MrsScorer, MrsScorer]] = {}
        rel = cfg.policy_mrs_score == "relative"
        for name in ideal_names:
            strat = _strategy_of(name, cfg)
            pair = []
            for k, ctx in enumerate((cal, ev)):
                if strat is None:
                    pair.append(MrsScorer(ctx, base, relative=rel))
                    continue
                prev, pe = ctx.prev_encodings()
                u = uncertainty_batch(dms[strat], ctx.prefixes, prev, K.Rng([seed, 73, k]), base,
                                      encodings=ctx.enc, prev_encodings=pe)
                grid = np.zeros(ctx.valid.shape)
                grid[ctx.valid] = u[ctx.seq_row[ctx.valid]]
                pair.append(MrsScorer(ctx, detectors[strat], grid, relative=rel))
            scorers[name] = (pair[0], pair[1])
        side_cal, side_ev = _drift_scores(cfg, seed, bundle, split, cal, ev)
        entries = []
        for name in cfg.policy_list:
            if name.startswith("ideal"):
                entries.append(SweepEntry(name, "mrs", *scorers[name]))
            else:
                entries.append(SweepEntry(name, name))
        rows, reports = frequency_sweep(cfg.sweep_budgets, entries, cal, ev, seed, bb_cfg.encoder,
                                        side_cal, side_ev)
        rows.extend(_native_rows(cfg, seed, bb_cfg.encoder, ev, side_ev))
        res.rows = rows

    with _Stage("report", timings):
        cs, es = scorers[cfg.revenue_policy]
        rep = reports.get((cfg.revenue_policy, cfg.revenue_budget))
        if rep is None:
            rep = run_replay(ev, Policy("mrs", tau=calibrate_mrs(cal, cs, cfg.revenue_budget)),
                             cfg.revenue_policy, es)
        rev = revenue_report(rep, cfg.revenue_group_size)
        res.revenue_rows, res.revenue_skipped = rev.rows, rev.skipped
        if out is not None:
            write_step_log(rep, out / "steps.tsv")
            emit_revenue(rev.rows, out / "revenue.csv")
            emit_curves(rows, out / "curves.csv")
            for name in ("steps.tsv", "revenue.csv", "curves.csv"):
                res.artifacts[name] = str(out / name)
    return res


def _drift_scores(cfg, seed, bundle, split, cal, ev):
    """LOF / SVDD scores of every step's sequence encoding against history encodings."""
    if not any(p in ("lof", "svdd") for p in cfg.policy_list):
        return None, None
    seqs = [p for s in split.history for p in s.prefixes]
    rng = K.Rng([seed, 81])
    idx = np.sort(rng.choice(len(seqs), size=min(cfg.policy_lof_reference, len(seqs)), replace=False))
    c = bundle.cfg
    ref = bundle.encode_array(pack_sequences([seqs[i] for i in idx], c.max_len, c.vocab_size))
    lof = lof_fit(ref, cfg.policy_lof_k)
    svdd = svdd_fit(ref, cfg.policy_svdd_quantile)
    out = []
    for ctx in (cal, ev):
        side = {}
        for name, fn in (("lof", lambda e: lof_scores(e, lof)), ("svdd", lambda e: svdd_scores(e, svdd))):
            grid = np.zeros(ctx.valid.shape)
            grid[ctx.valid] = fn(ctx.enc)[ctx.seq_row[ctx.valid]]
            side[name] = grid
        out.append(side)
    return out[0], out[1]


NATIVE_TAU = {"lof": 1.5, "svdd": 0.0}


def _native_rows(cfg, seed, backbone, ev, side_ev) -> list[dict]:
    """LOF / SVDD at their conventional fixed thresholds; budget column holds the realized frequency."""
    rows = []
    for name in ("lof", "svdd"):
        if name in cfg.policy_list:
            rep = run_replay(ev, Policy(name, tau=NATIVE_TAU[name]), f"{name}-native", None, side_ev)
            rows.append(curve_row(f"{name}-native", backbone, rep.realized_freq, rep, seed))
    return rows


# ---------------------------------------------------------------- whole run

def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run(cfg: ExperimentConfig, stop_after: str | None = None) -> dict:
    """Run every seed into ``cfg.out``; returns the manifest (also written as manifest.json)."""
    check(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    manifest: dict[str, Any] = {"config_sha256": cfg.digest(), "seeds": list(cfg.sweep_seeds),
                                "status": "incomplete", "stop_after": stop_after, "components": {},
                                "artifacts": {}, "timings": {}}
    all_rows = []
    try:
        for seed in cfg.sweep_seeds:
            res = run_seed(cfg, seed, out / f"seed-{seed}", stop_after)
            all_rows.extend(res.rows)
            manifest["components"][str(seed)] = res.checksums
            manifest["timings"][str(seed)] = {k: round(v, 3) for k, v in res.timings.items()}
            for name, path in res.artifacts.items():
                manifest["artifacts"][f"seed-{seed}/{name}"] = file_sha256(path)
        if stop_after is None:
            emit_curves(all_rows, out / "curves.csv")
            manifest["artifacts"]["curves.csv"] = file_sha256(out / "curves.csv")
        manifest["status"] = "complete"
    except StageError as exc:
        manifest["error"] = {"stage": exc.stage, "cause": str(exc.cause)}
        raise
    finally:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
