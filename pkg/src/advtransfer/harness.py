"""Experiment configs, the end-to-end pipeline, caching and result files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
import traceback as tb
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .attacks import CATEGORY_OF, STOCHASTIC, VARIANTS, craft, layer_sweep
from .augment import TransformSpec, input_diversity
from .data import ImageSet, ingest_dataset
from .defenses import defend_then_classify
from .engine import AdversarialBatch, AttackSpec
from .errors import AdvTransferError, ConfigError
from .metrics import MetricReport, imperceptibility, interpretability, model_kl, spearman
from .reference import DEFENSE_NAMES, ReferenceSetup, SetupConfig

SCHEMA_VERSION = 1
METRICS = ("psnr", "ssim", "delta_e", "lpips", "fid", "interpretability", "kl")
SWEEPS = ("iterations", "window", "copies", "layers", "eps", "diversity")


@dataclass
class AttackEntry:
    variant: str
    step_size: float | str  # "auto" = max(2*eps/T, 1/255)
    epsilon: float = 16 / 255
    iterations: int | None = None
    params: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        extra = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.variant}[{extra}]" if extra else self.variant

    def resolved_step(self) -> float | None:
        return None if self.step_size == "auto" else float(self.step_size)


@dataclass
class ExperimentConfig:
    attacks: list[AttackEntry]
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 0
    repeats: int = 1
    dataset: dict = field(default_factory=lambda: {"path": None, "label_file": None, "per_class": 5, "size": 32})
    surrogate: str = "surrogate"
    targets: list[str] = field(default_factory=lambda: ["plain16"])
    defenses: list[str] = field(default_factory=lambda: ["none"])
    metrics: list[str] = field(default_factory=lambda: list(METRICS))
    traceback: dict = field(default_factory=dict)
    sweeps: list[dict] = field(default_factory=list)
    setup: dict = field(default_factory=dict)
    cache: dict = field(default_factory=lambda: {"policy": "use"})

    # (de)serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        entries = []
        for a in d.pop("attacks", []):
            if isinstance(a, str):
                raise ConfigError(f"attack {a!r}: every attack block needs an explicit step_size")
            if "step_size" not in a:
                raise ConfigError(f"attack {a.get('variant')!r}: step_size is mandatory (number or 'auto')")
            entries.append(AttackEntry(**a))
        cfg = cls(attacks=entries, **d)
        cfg.validate()
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]

    def validate(self):
        if not self.attacks and not self.sweeps:
            raise ConfigError("config lists no attacks and no sweeps")
        setup = self.setup_config()
        for a in self.attacks:
            if a.variant not in VARIANTS:
                raise ConfigError(f"unknown attack {a.variant!r}")
            if a.step_size != "auto" and not (isinstance(a.step_size, (int, float)) and a.step_size > 0):
                raise ConfigError(f"{a.variant}: step_size must be positive or 'auto'")
        for d in self.defenses:
            if d not in DEFENSE_NAMES:
                raise ConfigError(f"unknown defense {d!r}")
        for t in self.targets:
            if t not in setup.targets and t not in setup.robust and t != "surrogate":
                raise ConfigError(f"unknown target model {t!r}")
        for m in self.metrics:
            if m not in METRICS:
                raise ConfigError(f"unknown metric {m!r}")
        for s in self.sweeps:
            if s.get("kind") not in SWEEPS:
                raise ConfigError(f"unknown sweep kind {s.get('kind')!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def setup_config(self) -> SetupConfig:
        cfg = SetupConfig()
        over = dict(self.setup)
        epochs = over.pop("epochs", None)
        scalars = {f.name for f in dataclasses.fields(SetupConfig)}
        bad = set(over) - scalars
        if bad:
            raise ConfigError(f"unknown setup keys: {sorted(bad)}")
        cfg = replace(cfg, **over)
        if epochs is not None:
            cfg.surrogate = replace(cfg.surrogate, epochs=epochs)
            cfg.dsm = replace(cfg.dsm, epochs=epochs)
            cfg.targets = {k: replace(r, epochs=epochs) for k, r in cfg.targets.items()}
            cfg.rfa = {k: replace(r, epochs=epochs) for k, r in cfg.rfa.items()}
            cfg.robust = {k: replace(r, epochs=epochs) for k, r in cfg.robust.items()}
        return cfg


# ----------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows: list[dict]) -> Path:
    """Deterministic CSV: column order from first appearance, floats via repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    path.write_text(buf.getvalue())
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, torch.Tensor):
        return o.tolist()
    return str(o)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=False))
    return path


def _finite(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


# ----------------------------------------------------------------------------
# pipeline


class Pipeline:
    """One experiment run. Stages may be called individually (CLI subcommands)."""

    def __init__(self, config: ExperimentConfig, out_dir, cache_dir=None, workers: int = 1, seed: int | None = None,
                 log=None):
        self.config = config
        self.out = Path(out_dir)
        self.workers = max(1, int(workers))
        self.seed = config.seed if seed is None else seed
        self.log = log or (lambda m: None)
        self.use_cache = config.cache.get("policy", "use") != "off"
        self.setup = ReferenceSetup(cache_dir, config.setup_config(), log=self.log)
        self.manifest = {"config_hash": config.digest(), "framework_version": __version__,
                         "seed": self.seed, "workers": self.workers, "timings": {}, "artifacts": {},
                         "seed_ledger": [], "attack_cache_hits": 0, "attack_computations": 0, "failures": []}
        self._batches: dict[tuple, AdversarialBatch] = {}

    # helpers ---------------------------------------------------------------
    def _timed(self, stage, fn):
        t = time.perf_counter()
        try:
            return fn()
        except Exception as e:
            self.manifest["failures"].append({"stage": stage, "error": f"{type(e).__name__}: {e}",
                                              "trace": tb.format_exc(limit=5)})
            raise
        finally:
            self.manifest["timings"][stage] = round(time.perf_counter() - t, 3)

    def _artifact(self, key, path):
        self.manifest["artifacts"][key] = str(Path(path).relative_to(self.out))

    def dataset(self) -> ImageSet:
        if not hasattr(self, "_dataset"):
            d = self.config.dataset
            models = [self.setup.model(self.config.surrogate)] + [self.setup.model(t) for t in self.config.targets]
            if d.get("path"):
                ds, report = ingest_dataset(d["path"], d.get("label_file"), d.get("size", 32), models,
                                            d.get("per_class"), self.seed)
            else:
                full = self.setup.eval_set
                ds = full.per_class(d.get("per_class", 5), self.seed) if d.get("per_class") else full
                report = {"loaded": len(self.setup.pool), "correct_by_all": len(full), "selected": len(ds)}
            self.manifest["dataset"] = {**report, "digest": ds.digest()}
            self._dataset = ds
        return self._dataset

    def models_needed(self):
        cats = {CATEGORY_OF[a.variant] for a in self.config.attacks}
        tb_cfg = self.config.traceback
        if tb_cfg.get("enabled"):
            cats |= {CATEGORY_OF[v] for v in tb_cfg.get("attacks") or VARIANTS}
        return cats

    def train_models(self):
        """Build (or load) every model the config refers to."""

        def run():
            s = self.setup
            s.model(self.config.surrogate)
            for t in self.config.targets:
                s.model(t)
            cats = self.models_needed()
            if "refinement" in cats:
                s.rfa_models, s.dsm_model
            if "generative" in cats:
                s.generators
            for d in self.config.defenses:
                s.defense(d)
            return {"cache_hits": s.cache_hits, "cache_misses": s.cache_misses}

        return self._timed("train-models", run)

    def context(self):
        if not hasattr(self, "_ctx"):
            self._ctx = self.setup.context(self.models_needed())
        return self._ctx

    def _attack_key(self, entry: AttackEntry, seed: int, ds: ImageSet) -> str:
        ctx = self.context()
        deps = [ctx.surrogate.param_digest()]
        cat = CATEGORY_OF[entry.variant]
        if entry.variant == "RFA":
            deps.append(ctx.rfa_models[entry.params.get("norm", "L2")].param_digest())
        elif entry.variant == "DSM":
            deps.append(ctx.dsm_model.param_digest())
        elif cat == "generative":
            deps.append(ctx.generators[entry.variant].digest())
        elif entry.variant in ("Admix", "AA"):
            deps.append(self.setup.train.digest())
        spec = AttackSpec(entry.variant, entry.epsilon, entry.resolved_step(), entry.iterations, seed=seed,
                          params=entry.params)
        return hashlib.sha256(f"{spec.digest()}:{':'.join(deps)}:{ds.digest()}".encode()).hexdigest()[:20]

    def attack(self, entry: AttackEntry, repeat: int = 0) -> AdversarialBatch:
        ds = self.dataset()
        seed = self.seed + repeat
        key = (entry.label, entry.epsilon, seed)
        if key in self._batches:
            return self._batches[key]
        ckey = self._attack_key(entry, seed, ds)
        path = self.setup.cache_dir / "attacks" / f"{entry.variant}-{ckey}"
        if self.use_cache and (path / "manifest.json").exists():
            batch = AdversarialBatch.load(path)
            self.manifest["attack_cache_hits"] += 1
        else:
            self.log(f"crafting {entry.label} eps={entry.epsilon:.4f} seed={seed}")
            batch = craft(entry.variant, self.context(), ds.images, ds.labels, entry.epsilon, seed,
                          params=entry.params, iterations=entry.iterations, step_size=entry.resolved_step())
            batch.names = list(ds.names)
            self.manifest["attack_computations"] += 1
            if self.use_cache:
                batch.save(path)
                batch = AdversarialBatch.load(path)
        self.manifest["seed_ledger"].append({"attack": entry.label, "epsilon": entry.epsilon, "repeat": repeat,
                                             "seed": seed, "cache_key": ckey})
        self._batches[key] = batch
        return batch

    def _map(self, fn, items):
        if self.workers == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.workers) as ex:
            return list(ex.map(fn, items))

    def run_attacks(self, save_dir: bool = True) -> dict:
        def run():
            self.dataset()
            self.context()
            jobs = [(a, r) for a in self.config.attacks for r in range(self.config.repeats)]
            results = self._map(lambda j: self.attack(*j), jobs)
            out = {}
            for (a, r), b in zip(jobs, results):
                out[(a.label, a.epsilon, r)] = b
                if save_dir and r == 0:
                    d = self.out / "attacks" / f"{a.label}-eps{round(a.epsilon * 255)}"
                    b.save(d)
                    self._artifact(f"attack:{a.label}:{round(a.epsilon * 255)}", d)
            return out

        return self._timed("run-attacks", run)

    def run_defenses(self) -> list[dict]:
        """Success-rate grid: one row per attack, one column per (target, defense), mean and std over repeats."""

        def run():
            batches = self.run_attacks(save_dir=False)
            defenses = {d: self.setup.defense(d, self.seed) for d in self.config.defenses}
            targets = {t: self.setup.model(t) for t in self.config.targets}
            rows = []
            for a in self.config.attacks:
                row = {"attack": a.label, "category": CATEGORY_OF[a.variant], "epsilon": a.epsilon,
                       "stochastic": a.variant in STOCHASTIC}
                for tname, tmodel in targets.items():
                    for dname, dspec in defenses.items():
                        vals = []
                        for r in range(self.config.repeats):
                            b = batches[(a.label, a.epsilon, r)]
                            pred = defend_then_classify(dspec, b, tmodel)
                            vals.append((pred != b.labels).double().mean().item())
                        col = f"{tname}/{dname}"
                        row[f"{col}:mean"] = float(np.mean(vals))
                        row[f"{col}:std"] = float(np.std(vals))
                rows.append(row)
            p = write_csv(self.out / "transfer.csv", rows)
            self._artifact("transfer_table", p)
            return rows

        return self._timed("run-defenses", run)

    def evaluate(self) -> dict:
        def run():
            grid = self.run_defenses()
            batches = self.run_attacks(save_dir=True)
            reports = []
            ctx = self.context()
            first_target = self.setup.model(self.config.targets[0])
            for a, g in zip(self.config.attacks, grid):
                b = batches[(a.label, a.epsilon, 0)]
                rep = MetricReport(a.label, {k[:-5]: v for k, v in g.items() if k.endswith(":mean")})
                want = set(self.config.metrics)
                if want & {"psnr", "ssim", "delta_e", "lpips", "fid"}:
                    m = imperceptibility(b.originals, b.adversarials, self.setup.surrogate)
                    for k in ("psnr", "ssim", "delta_e", "lpips", "fid"):
                        if k in want:
                            setattr(rep, k, m[k])
                    rep.fid_regularized = m["fid_regularized"]
                attack_model = _attack_model(ctx, a)
                if "interpretability" in want and attack_model is not None:
                    rep.ai_pct, rep.ad_pct = interpretability(attack_model, b.originals, b.labels)
                if "kl" in want and attack_model is not None:
                    rep.kl = model_kl(attack_model, first_target, b.originals)
                reports.append(rep)
            rows = [r.to_row() for r in reports]
            p = write_csv(self.out / "imperceptibility.csv", rows)
            self._artifact("imperceptibility_table", p)
            diag = {}
            key = f"{self.config.targets[0]}/{self.config.defenses[0]}"
            succ = [r.success_rate.get(key) for r in reports]
            for k in ("psnr", "ssim", "delta_e", "lpips", "fid"):
                vals = [getattr(r, k) for r in reports]
                if len(reports) >= 2 and all(v is not None and math.isfinite(v) for v in vals):
                    diag[k] = spearman(succ, vals)
            results = {"transfer": grid, "metrics": [_clean_row(r) for r in rows], "spearman": diag}
            self._artifact("results", write_json(self.out / "results.json", results))
            return results

        return self._timed("evaluate", run)

    def traceback(self) -> dict:
        from .attribution import build_traceback_dataset, class_frequency_distribution, train_image_classifier, \
            train_misclass_svm

        def run():
            cfg = self.config.traceback
            names = cfg.get("attacks") or list(VARIANTS)
            eps = cfg.get("epsilon", 16 / 255)
            ds = self.dataset()
            per = cfg.get("per_attack")
            if per is not None and per < len(ds):
                ds = ds.subset(sorted(torch.randperm(len(ds), generator=torch.Generator().manual_seed(self.seed))[:per].tolist()))
                self._dataset_tb = ds
            entries = [AttackEntry(v, "auto", eps) for v in names]
            sources = {}
            for e in entries:
                sources[e.variant] = (lambda e=e: self._attack_on(e, ds))
            tds = build_traceback_dataset(sources, self.seed, cfg.get("train_per_attack"))
            _, rep = train_image_classifier(tds, cfg.get("mode", "image"), epochs=cfg.get("epochs", 30),
                                            seed=self.seed)
            target = self.setup.model(self.config.targets[0])
            svm = train_misclass_svm(tds, target, tuple(cfg.get("n_values", (1, 3, 5, 10))))
            preds = {n: target.predict(tds.adversarial[tds.attack == i]) for i, n in enumerate(tds.attack_names)}
            freq = class_frequency_distribution(preds)
            write_csv(self.out / "traceback_confusion.csv", rep.confusion_rows())
            write_csv(self.out / "traceback_svm.csv", svm)
            out = {"accuracy": rep.accuracy, "category_accuracy": rep.category_accuracy,
                   "per_attack_recall": rep.per_attack_recall, "per_category_recall": rep.per_category_recall,
                   "chance": 1 / len(tds.attack_names), "svm": svm, "class_frequency": freq,
                   "confusion": rep.confusion, "attack_names": tds.attack_names}
            self._artifact("traceback", write_json(self.out / "traceback.json", out))
            return out

        return self._timed("traceback", run)

    def _attack_on(self, entry, ds):
        ctx = self.context()
        b = craft(entry.variant, ctx, ds.images, ds.labels, entry.epsilon, self.seed)
        self.manifest["attack_computations"] += 1
        return b

    def sweep(self) -> dict:
        def run():
            out = {}
            for i, s in enumerate(self.config.sweeps):
                sid = s.get("id", f"{s['kind']}{i}")
                rows = self._run_sweep(s)
                out[sid] = {"kind": s["kind"], "rows": rows}
                write_csv(self.out / "sweeps" / f"{sid}.csv", rows)
            self._artifact("sweeps", write_json(self.out / "sweeps.json", out))
            return out

        return self._timed("sweep", run)

    def _run_sweep(self, s: dict) -> list[dict]:
        ds = self.dataset()
        ctx = self.context()
        target = self.setup.model(s.get("target", self.config.targets[0]))
        eps = s.get("epsilon", 16 / 255)
        x, y = ds.images, ds.labels

        def rate(adv):
            return (target.predict(adv) != y).double().mean().item()

        kind = s["kind"]
        rows = []
        if kind == "iterations":
            for v in s["attacks"]:
                b = craft(v, ctx, x, y, eps, self.seed, probe=target, iterations=s.get("iterations", 50),
                          step_size=s.get("step_size"))
                rows += [{"attack": v, "iteration": i + 1, "success": c} for i, c in enumerate(b.per_iteration_success)]
        elif kind == "window":
            from .engine import run_iterative_attack

            for k in s["values"]:
                spec = AttackSpec("PI", eps, iterations=s.get("iterations", 10), stabilization=f"window:{k}",
                                  step_size=s.get("step_size"))
                rows.append({"window": str(k), "success": rate(run_iterative_attack(spec, ctx.surrogate, x, y).adversarials)})
        elif kind == "copies":
            for v in s["attacks"]:
                for m in s["values"]:
                    b = craft(v, ctx, x, y, eps, self.seed, params={"copies": int(m)}, step_size=s.get("step_size"))
                    rows.append({"attack": v, "copies": int(m), "success": rate(b.adversarials)})
        elif kind == "layers":
            for v in s["attacks"]:
                rows += layer_sweep(v, s["layers"], ctx, x, y, target, eps, self.seed)
        elif kind == "eps":
            from .generative import eps_sweep

            base = self.setup.generator_config(s.get("attack", "CDA"))
            rows = eps_sweep(base, ctx.surrogate, self.setup.train, x, y, target, s["eps_train"], s["eps_test"],
                             self.setup.cache_dir / "generators")
        elif kind == "diversity":
            from .augment import DonorPool

            donors = DonorPool(self.setup.train.images, self.setup.train.labels)
            for v in s["attacks"]:
                spec = TransformSpec(v, epsilon=eps)
                rows.append({"transform": v, "diversity": input_diversity(spec, ctx.surrogate, ds, s.get("repeats", 1),
                                                                          self.seed, donors)})
        return rows

    def write_manifest(self, status="ok") -> Path:
        self.manifest["status"] = status
        self.manifest["cache_hits"] = self.setup.cache_hits
        self.manifest["cache_misses"] = self.setup.cache_misses
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.yaml").write_text(self.config.to_yaml())
        return write_json(self.out / "manifest.json", self.manifest)


def _attack_model(ctx, entry: AttackEntry):
    cat = CATEGORY_OF[entry.variant]
    if cat == "generative":
        return ctx.surrogate
    if entry.variant in ("SGM", "LinBP", "IAA"):
        return ctx.refined(entry.variant)
    if entry.variant == "RFA":
        return ctx.rfa_models.get(entry.params.get("norm", "L2"))
    if entry.variant == "DSM":
        return ctx.dsm_model
    return ctx.surrogate


def _clean_row(row: dict) -> dict:
    return {k: _finite(v) for k, v in row.items()}


def run_experiment(config: ExperimentConfig, out_dir, cache_dir=None, workers: int = 1, seed: int | None = None,
                   log=None) -> dict:
    """Full pipeline: models, attacks, defenses, metrics, then traceback and sweeps if configured."""
    p = Pipeline(config, out_dir, cache_dir, workers, seed, log)
    try:
        p.train_models()
        results = p.evaluate() if config.attacks else {}
        if config.traceback.get("enabled"):
            results["traceback"] = p.traceback()
        if config.sweeps:
            results["sweeps"] = p.sweep()
    except AdvTransferError as e:
        path = p.write_manifest("failed")
        raise ExperimentFailed(str(e), path) from e
    except Exception as e:
        path = p.write_manifest("failed")
        raise ExperimentFailed(f"{type(e).__name__}: {e}", path) from e
    results["manifest"] = str(p.write_manifest())
    results["pipeline"] = p
    return results


class ExperimentFailed(AdvTransferError):
    def __init__(self, message, manifest_path):
        super().__init__(f"{message} (manifest: {manifest_path})")
        self.manifest_path = manifest_path
