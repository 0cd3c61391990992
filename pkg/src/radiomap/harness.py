"""Scenario orchestration: input stacks, training loop and evaluation campaigns."""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import re
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import baselines
from .actgan import (
    FeaturePyramid,
    GeneratorConfig,
    discriminator_forward,
    disc_loss,
    generator_forward,
    init_discriminator,
    init_generator,
    loss_total,
)
from .blocks import named_parameters
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .evaluation import EvalReport, Record, evaluate_map
from .simdata import (
    GridMap,
    Sample,
    SampleMask,
    add_gaussian_noise,
    apply_threshold,
    load_dataset,
    make_block_mask,
    make_mask,
    parse_setting,
    sample_map,
    split_regions,
    synthesize,
    tx_onehot,
    write_map,
)
from .tensor import AdamState, Tensor, adam_step, backward, no_grad, tape_scope

log = logging.getLogger(__name__)

NONFINITE_LIMIT = 3


class TrainingAborted(RuntimeError):
    """Training stopped after repeated non-finite losses."""


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (map ids, epochs, labels)."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# data ------------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _synthetic(regions, tx_per_region, size, seed, params):
    return tuple(synthesize(regions, tx_per_region, size, seed, params))


def load_samples(cfg: RunConfig) -> list[Sample]:
    d = cfg.dataset
    if d.source == "ingest":
        return load_dataset(d.path)
    return list(_synthetic(d.regions, d.tx_per_region, d.size, d.seed, cfg.sim))


def split_samples(samples: Sequence[Sample], cfg: RunConfig) -> dict[str, list[Sample]]:
    ratios = (cfg.split.train, cfg.split.val, cfg.split.test)
    regions = split_regions({s.region_id for s in samples}, ratios, cfg.split.seed)
    out = {}
    for name, ids in regions.items():
        keep = set(ids)
        out[name] = [s for s in samples if s.region_id in keep]
    return out


# scenario inputs -------------------------------------------------------------

@dataclass
class ScenarioItem:
    inputs: np.ndarray  # (C, H, W)
    target: GridMap
    mask: SampleMask | None = None
    samples: GridMap | None = None


def build_scenario_inputs(
    sample: Sample,
    cfg: RunConfig,
    *,
    setting=None,
    sigma: float | None = None,
    threshold: float | None = None,
    salt="",
) -> ScenarioItem:
    """Input stack and thresholded target for one map.

    scenario 1: [buildings, tx]; scenario 2: [buildings, tx, samples];
    scenario 3: [buildings, samples, mask].
    """
    scenario = cfg.scenario.scenario
    thr = cfg.scenario.threshold if threshold is None else threshold
    sigma = cfg.scenario.sigma if sigma is None else sigma
    target = apply_threshold(sample.gain, thr)
    target.tx_pixel = sample.tx
    b = sample.buildings.values
    if scenario in (1, 2) and sample.tx is None:
        raise ValueError(f"scenario {scenario} needs the transmitter position of map {sample.map_id}")
    if scenario == 1:
        return ScenarioItem(np.stack([b, tx_onehot(b.shape, sample.tx).values]), target)
    if scenario == 2:
        setting = cfg.scenario.setting if setting is None else setting
        mask = make_mask(setting, sample.buildings, derive_seed("mask", sample.map_id, str(setting), salt))
    else:
        omega = cfg.scenario.omega if setting is None else int(parse_setting(setting)[1])
        mask = make_block_mask(omega, sample.buildings, derive_seed("blocks", sample.map_id, omega, salt))
    obs = sample_map(target, mask)
    obs = add_gaussian_noise(obs, mask, sigma, derive_seed("noise", sample.map_id, str(setting), salt))
    if scenario == 2:
        stack = np.stack([b, tx_onehot(b.shape, sample.tx).values, obs.values])
    else:
        stack = np.stack([b, obs.values, mask.mask.astype(np.float64)])
    return ScenarioItem(stack, target, mask, obs)


def _batch(items: Sequence[ScenarioItem], dtype) -> tuple[Tensor, Tensor]:
    x = np.stack([it.inputs for it in items]).astype(dtype)
    y = np.stack([it.target.values[None] for it in items]).astype(dtype)
    return Tensor(x), Tensor(y)


# model bundle ------------------------------------------------------------------

@dataclass
class Model:
    config: GeneratorConfig
    gen: object
    disc: object

    @classmethod
    def init(cls, gc: GeneratorConfig) -> "Model":
        return cls(gc, init_generator(gc), init_discriminator(gc))

    def gen_params(self) -> dict[str, Tensor]:
        return dict(named_parameters(self.gen))

    def disc_params(self) -> dict[str, Tensor]:
        return dict(named_parameters(self.disc))

    def predict(self, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Stage-2 maps for an (N, C, H, W) stack."""
        outs = []
        with no_grad():
            for s in range(0, len(inputs), batch_size):
                x = Tensor(np.asarray(inputs[s : s + batch_size], dtype=self.config.np_dtype))
                outs.append(generator_forward(x, self.gen)[1].data[:, 0])
        return np.concatenate(outs).astype(np.float64)


def lr_at(epoch: int, cfg: RunConfig) -> float:
    """Learning rate for 1-based ``epoch``: base until the decay epoch, then scaled."""
    s = cfg.schedule
    return s.lr / (1.0 / s.lr_decay_factor) if epoch > s.lr_decay_epoch else s.lr


def checkpoint_config(cfg: RunConfig, epoch: int, val_mse: float) -> dict:
    # the output directory is where a run lives, not what it learned
    run = cfg.to_dict()
    run.pop("output")
    return {"model": cfg.model_identity(), "run": run, "epoch": epoch, "val_mse": val_mse}


def make_checkpoint(model: Model, opt_g: AdamState, opt_d: AdamState, config: dict) -> Checkpoint:
    ck = Checkpoint(config)
    ck.put_params("gen", model.gen_params())
    ck.put_params("disc", model.disc_params())
    ck.put_adam("adam_gen", opt_g)
    ck.put_adam("adam_disc", opt_d)
    return ck


def model_from_checkpoint(ck: Checkpoint) -> Model:
    gc = GeneratorConfig(**ck.config["model"]["generator"])
    model = Model.init(gc)
    ck.load_params("gen", model.gen_params())
    ck.load_params("disc", model.disc_params())
    return model


# training ------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_mse: float
    disc_loss: float
    val_mse: float
    seconds: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} lr={self.lr:.3e} train_loss={self.train_loss:.6f} train_mse={self.train_mse:.6f} "
            f"disc_loss={self.disc_loss:.6f} val_mse={self.val_mse:.6f} seconds={self.seconds:.1f}"
        )


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0


def validation_mse(model: Model, items: Sequence[ScenarioItem], batch_size: int) -> float:
    if not items:
        return float("nan")
    x = np.stack([it.inputs for it in items])
    y = np.stack([it.target.values for it in items])
    pred = model.predict(x, batch_size)
    return float(np.mean((pred - y) ** 2))


def train_step(model: Model, x: Tensor, y: Tensor, opt_g: AdamState, opt_d: AdamState, lr: float, cfg: RunConfig, pyr) -> dict:
    """One discriminator update followed by one generator update."""
    weights = cfg.loss_weights()
    gp, dp = model.gen_params(), model.disc_params()
    with tape_scope():
        s1, s2 = generator_forward(x, model.gen)
        d_loss = None
        if weights.adv:
            d_loss = disc_loss(discriminator_forward(x, y, model.disc), discriminator_forward(x, s2.detach(), model.disc))
            if np.isfinite(d_loss.item()):
                gd = backward(d_loss, wrt=dp.values(), accumulate=False)
                adam_step(dp, {n: gd[t.id] for n, t in dp.items()}, opt_d, lr)
        logits = discriminator_forward(x, s2, model.disc) if weights.adv else None
        terms = loss_total(s2, s1, y, logits, weights, pyr)
        total = terms.total.item()
        if np.isfinite(total):
            gg = backward(terms.total, wrt=gp.values(), accumulate=False)
            adam_step(gp, {n: gg[t.id] for n, t in gp.items()}, opt_g, lr)
    return {"total": total, "mse": terms.parts["mse"], "disc": d_loss.item() if d_loss is not None else 0.0}


def _dump_diagnostics(path: Path, model: Model, losses: list[dict], epoch: int, step: int) -> None:
    norms = {n: float(np.linalg.norm(t.data)) for n, t in model.gen_params().items()}
    finite = {n: bool(np.all(np.isfinite(t.data))) for n, t in model.gen_params().items()}
    path.write_text(
        json.dumps({"epoch": epoch, "step": step, "recent_losses": losses, "param_norms": norms, "param_finite": finite}, indent=2)
    )


def train(
    cfg: RunConfig,
    samples: Sequence[Sample] | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    splits = split_samples(load_samples(cfg) if samples is None else samples, cfg)
    if not splits["train"]:
        raise ValueError("training split is empty")
    gc = cfg.generator_config()
    model = Model.init(gc)
    pyr = FeaturePyramid.build(dtype=gc.np_dtype)
    opt_g, opt_d = AdamState(), AdamState()
    val_items = [build_scenario_inputs(s, cfg, salt="val") for s in splits["val"]]
    bs = cfg.schedule.batch_size
    result = TrainResult(out / "best.ckpt", out / "last.ckpt")
    best = math.inf
    bad_streak = 0
    recent: list[dict] = []
    with (out / "train.log").open("w", encoding="utf-8") as logf:
        for epoch in range(1, cfg.schedule.epochs + 1):
            t0 = time.perf_counter()
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng(derive_seed("order", cfg.seed, epoch)).permutation(len(splits["train"]))
            n_batches = math.ceil(len(order) / bs)
            if cfg.schedule.max_batches:
                n_batches = min(n_batches, cfg.schedule.max_batches)
            sums = {"total": 0.0, "mse": 0.0, "disc": 0.0}
            counted = 0
            for b in range(n_batches):
                chunk = [splits["train"][i] for i in order[b * bs : (b + 1) * bs]]
                items = [build_scenario_inputs(s, cfg, salt=("train", cfg.seed, epoch)) for s in chunk]
                x, y = _batch(items, gc.np_dtype)
                losses = train_step(model, x, y, opt_g, opt_d, lr, cfg, pyr)
                recent = (recent + [losses])[-NONFINITE_LIMIT:]
                if not np.isfinite(losses["total"]):
                    bad_streak += 1
                    if bad_streak >= NONFINITE_LIMIT:
                        diag = out / "diagnostics.json"
                        _dump_diagnostics(diag, model, recent, epoch, b)
                        raise TrainingAborted(f"{NONFINITE_LIMIT} consecutive non-finite losses at epoch {epoch}; see {diag}")
                    continue
                bad_streak = 0
                counted += 1
                for k in sums:
                    sums[k] += losses[k]
            val = validation_mse(model, val_items, max(bs, 8))
            entry = EpochLog(epoch, lr, *(sums[k] / max(counted, 1) for k in ("total", "mse", "disc")), val, time.perf_counter() - t0)
            result.history.append(entry)
            logf.write(entry.line() + "\n")
            logf.flush()
            log.info(entry.line())
            if on_epoch is not None:
                on_epoch(entry)
            score = val if np.isfinite(val) else entry.train_mse
            if score < best:
                best = score
                result.best_epoch = epoch
                save_checkpoint(make_checkpoint(model, opt_g, opt_d, checkpoint_config(cfg, epoch, score)), result.best_path)
    save_checkpoint(
        make_checkpoint(model, opt_g, opt_d, checkpoint_config(cfg, cfg.schedule.epochs, result.history[-1].val_mse if result.history else float("nan"))),
        result.last_path,
    )
    if not result.best_path.exists():
        shutil.copyfile(result.last_path, result.best_path)
    return result


# evaluation campaigns ------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    """One campaign cell: a threshold, a sampling setting and a noise level."""

    threshold: float
    setting: str | None
    sigma: float = 0.0

    @property
    def label(self) -> str:
        base = f"thr:{self.threshold:g}" if self.setting is None else self.setting
        return base if self.sigma == 0 else f"{base}~s{self.sigma:g}"


@dataclass
class Campaign:
    thresholds: list[float] | None = None
    settings: list[str] | None = None
    rates: list[float] | None = None
    omegas: list[int] | None = None
    sigmas: list[float] | None = None

    _KEYS = {
        "threshold": "thresholds",
        "setting": "settings",
        "rate": "rates",
        "omega": "omegas",
        "sigma": "sigmas",
        "noise": "sigmas",
    }

    @classmethod
    def parse(cls, specs: Sequence[str]) -> "Campaign":
        """Parse ``key=v1,v2`` items such as ``omega=20,50`` or ``sigma=10,20,50``."""
        camp = cls()
        for spec in specs:
            key, sep, vals = spec.partition("=")
            key = key.strip().lower()
            key = key[:-1] if key.endswith("s") and key[:-1] in cls._KEYS else key
            if not sep or key not in cls._KEYS:
                raise ValueError(f"bad campaign item {spec!r}; use one of {sorted(cls._KEYS)}=v1,v2,...")
            items = [v.strip() for v in vals.split(",") if v.strip()]
            attr = cls._KEYS[key]
            conv = {"thresholds": float, "settings": str, "rates": float, "omegas": int, "sigmas": float}[attr]
            try:
                setattr(camp, attr, [conv(v) for v in items])
            except ValueError as exc:
                raise ValueError(f"bad campaign item {spec!r}: {exc}") from None
        return camp

    def cells(self, cfg: RunConfig) -> list[Cell]:
        ev = cfg.evaluate
        sigmas = self.sigmas if self.sigmas is not None else ev.sigmas
        scenario = cfg.scenario.scenario
        if scenario == 1:
            thresholds = self.thresholds if self.thresholds is not None else ev.thresholds
            return [Cell(t, None) for t in thresholds]
        thr = cfg.scenario.threshold
        if scenario == 2:
            explicit = self.settings is not None or self.rates is not None
            settings = list(self.settings or []) if explicit else list(ev.settings)
            rates = list(self.rates or []) if explicit else list(ev.rates)
            labels = [parse_setting(s)[0] if parse_setting(s)[1] is None else s for s in settings]
            labels += [f"fixed:{r:g}" for r in rates]
            return [Cell(thr, lab, s) for lab in labels for s in sigmas]
        omegas = self.omegas if self.omegas is not None else ev.omegas
        return [Cell(thr, f"blocks:{o}", s) for o in omegas for s in sigmas]


def check_compatible(ck: Checkpoint, cfg: RunConfig, cells: Sequence[Cell]) -> None:
    """Reject a checkpoint whose model identity does not fit ``cfg``."""
    have = ck.config.get("model")
    if not isinstance(have, dict):
        raise CheckpointError("checkpoint carries no model identity")
    want = cfg.model_identity()
    # the init seed is irrelevant once trained weights are loaded
    gen_have = {k: v for k, v in (have.get("generator") or {}).items() if k != "seed"}
    gen_want = {k: v for k, v in want["generator"].items() if k != "seed"}
    if gen_have != gen_want:
        raise CheckpointError(f"checkpoint generator {gen_have} does not match config {gen_want}")
    if have.get("scenario") != want["scenario"]:
        raise CheckpointError(f"checkpoint scenario {have.get('scenario')} does not match config {want['scenario']}")
    if not any(abs(c.threshold - have["threshold"]) < 1e-12 for c in cells):
        raise CheckpointError(f"checkpoint threshold {have['threshold']} is not part of the campaign")


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def evaluate(
    cfg: RunConfig,
    checkpoints: Sequence = (),
    campaign: Campaign | None = None,
    samples: Sequence[Sample] | None = None,
    out_dir=None,
) -> EvalReport:
    """Run every enabled baseline plus each checkpoint over the campaign grid.

    Checkpoints are matched to cells by their training threshold; cells with
    no matching checkpoint carry baseline rows only.
    """
    campaign = campaign or Campaign()
    cells = campaign.cells(cfg)
    cks = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints]
    for ck in cks:
        check_compatible(ck, cfg, cells)
    models = [(ck.config["model"]["threshold"], model_from_checkpoint(ck)) for ck in cks]
    for name in cfg.evaluate.baselines:
        if name not in baselines.METHODS:
            raise ValueError(f"unknown baseline {name!r}")
    splits = split_samples(load_samples(cfg) if samples is None else samples, cfg)
    test = splits[cfg.evaluate.split]
    if cfg.evaluate.max_maps:
        test = test[: cfg.evaluate.max_maps]
    scenario = cfg.scenario.scenario
    report = EvalReport()
    report.metadata = {
        "seed": cfg.seed,
        "scenario": scenario,
        "models": [ck.config["model"] for ck in cks],
        "config_digests": [ck.digest.hex() for ck in cks],
        "maps": len(test),
    }
    out = Path(out_dir) if out_dir is not None else None
    for cell in cells:
        items = [
            build_scenario_inputs(s, cfg, setting=cell.setting, sigma=cell.sigma, threshold=cell.threshold, salt="eval")
            for s in test
        ]
        loc = scenario == 3
        preds: dict[str, list[np.ndarray]] = {}
        for thr, model in models:
            if abs(thr - cell.threshold) < 1e-12:
                preds["actgan"] = list(model.predict(np.stack([it.inputs for it in items])))
        if scenario != 1:
            for name in cfg.evaluate.baselines:
                preds[name] = [baselines.run_baseline(name, it.samples, it.mask).values for it in items]
        for method, maps in preds.items():
            for i, (s, it, pm) in enumerate(zip(test, items, maps)):
                pred = GridMap(np.clip(pm, 0.0, 1.0), "pathloss", map_id=s.map_id)
                report.add(evaluate_map(pred, it.target, s.map_id, scenario, method, cell.label, s.tx if loc else None))
                if out is not None and i < cfg.evaluate.emit_maps:
                    d = out / "maps" / _safe(cell.label) / method
                    d.mkdir(parents=True, exist_ok=True)
                    write_map(pred, d / f"{s.map_id}.rmap")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
        (out / "report_pivot.csv").write_text(report.pivot_csv(), encoding="utf-8")
        (out / "report_meta.json").write_text(json.dumps(report.metadata, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report
