"""Run configuration, manifest bookkeeping and the staged workflow.

Stage 1 decides which layers and channels each subnet keeps
(``calibrate-depth``, ``calibrate-width``); stage 2 fine-tunes the shared
adapter over the whole grid (``finetune``); deployment commands extract,
search and profile subnets of the fine-tuned model.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, checkpoint
from .data import (
    Corpus,
    EvalCache,
    Evaluator,
    cached_evaluate,
    calibration_facts,
    eval_windows,
    fact_accuracy,
    load_corpus,
    perplexity,
)
from .depth import DPTable, build_dp
from .model import ElasticModel, ModelConfig, adapted_shapes
from .search import SearchSpec, count_flops, count_params, profile, profile_csv, search
from .shapes import ShapeGrid, SubnetShape, layer_shape
from .smol import SMoLBank
from .tensor import Rng, Tensor
from .train import FinetuneConfig, PretrainConfig, finetune, pretrain
from .width import build_width_plan, collect_stats, WidthPlan


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


class PrerequisiteError(RuntimeError):
    pass


class IntegrityError(RuntimeError):
    pass


@dataclass
class CalibrationConfig:
    metric: str = "facts"
    n_facts: int = 40
    ppl_tokens: int = 4096
    width_tokens: int = 4096


@dataclass
class PipelineConfig:
    corpus: str | None = None
    facts: str | None = None
    out: str = "runs"
    seed: int = 0
    model: ModelConfig = field(default_factory=lambda: ModelConfig(max_seq_len=64))
    grid: ShapeGrid = field(default_factory=ShapeGrid)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def validate(self) -> None:
        n = self.model.n_layers
        if self.grid.depths[-1] > n:
            raise ConfigError("grid.depths", f"depth {self.grid.depths[-1]} exceeds n_layers={n}")
        if self.grid.depths[-1] != n:
            raise ConfigError("grid.depths", "largest depth must equal n_layers")
        if self.max_remove >= n:
            raise ConfigError("grid.depths", f"max removal M={self.max_remove} must be < N={n}")
        if self.calibration.metric not in ("facts", "ppl"):
            raise ConfigError("calibration.metric", "must be 'facts' or 'ppl'")
        if self.calibration.n_facts < 1:
            raise ConfigError("calibration.n_facts", "must be >= 1")
        if self.grid.k_sample > len(self.grid):
            raise ConfigError("grid.k_sample", f"K={self.grid.k_sample} exceeds grid size {len(self.grid)}")
        if self.finetune.top_k > self.finetune.n_loras or self.finetune.top_k < 1:
            raise ConfigError("finetune.top_k", "must lie in [1, n_loras]")
        if self.finetune.steps < 0 or self.pretrain.steps < 0:
            raise ConfigError("steps", "must be >= 0")

    @property
    def max_remove(self) -> int:
        return self.model.n_layers - self.grid.depths[0]

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus,
            "facts": self.facts,
            "out": self.out,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "grid": self.grid.to_dict(),
            "pretrain": dataclasses.asdict(self.pretrain),
            "finetune": dataclasses.asdict(self.finetune),
            "calibration": dataclasses.asdict(self.calibration),
        }

    def run_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        # identify inputs by content so relocating a file keeps the run
        for key in ("corpus", "facts"):
            if d[key] is not None:
                try:
                    d[key] = checkpoint.file_hash(d[key])
                except OSError as exc:
                    raise ConfigError(key, f"cannot read {d[key]}: {exc.strerror}") from None
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        top = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in top:
                raise ConfigError(k, "unknown field")

        def sub(name, klass, convert=None):
            raw = d.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(name, "must be an object")
            names = {f.name for f in dataclasses.fields(klass) if not f.name.startswith("_")}
            for k in raw:
                if k not in names:
                    raise ConfigError(f"{name}.{k}", "unknown field")
            try:
                return convert(raw) if convert else klass(**raw)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(name, str(exc)) from None

        base_model = ModelConfig(max_seq_len=64).to_dict()
        cfg = cls(
            corpus=d.get("corpus"),
            facts=d.get("facts"),
            out=d.get("out", "runs"),
            seed=int(d.get("seed", 0)),
            model=sub("model", ModelConfig, lambda r: ModelConfig(**{**base_model, **r})),
            grid=sub(
                "grid",
                ShapeGrid,
                lambda r: ShapeGrid.from_dict({**ShapeGrid().to_dict(), **r}),
            ),
            pretrain=sub("pretrain", PretrainConfig),
            finetune=sub("finetune", FinetuneConfig),
            calibration=sub("calibration", CalibrationConfig),
        )
        for key, typ in (("seed", int),):
            if not isinstance(d.get(key, 0), typ):
                raise ConfigError(key, f"must be {typ.__name__}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text()) if path else {}
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        for env, key in (("SUBNETKIT_CORPUS", "corpus"), ("SUBNETKIT_FACTS", "facts"), ("SUBNETKIT_OUT", "out")):
            if os.environ.get(env):
                d[key] = os.environ[env]
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)


STAGES = {
    "pretrain": {"artifact": "model.ckpt", "needs": []},
    "calibrate-depth": {"artifact": "dp_table.json", "needs": ["pretrain"]},
    "calibrate-width": {"artifact": "width_plan.json", "needs": ["pretrain"]},
    "finetune": {"artifact": "bank.ckpt", "needs": ["pretrain", "calibrate-depth", "calibrate-width"]},
}


def _dependents(stage: str) -> list[str]:
    out = []
    for name, spec in STAGES.items():
        if stage in spec["needs"]:
            out += [name] + _dependents(name)
    return out


class Run:
    """One output directory keyed by the configuration hash."""

    def __init__(self, config: PipelineConfig, root: str | Path | None = None):
        config.validate()
        self.config = config
        self.dir = Path(root if root is not None else config.out) / config.run_hash()
        self.dir.mkdir(parents=True, exist_ok=True)
        self._corpus: Corpus | None = None
        self._model: ElasticModel | None = None

    # -- manifest ------------------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"tool_version": __version__, "config": self.config.to_dict(), "stages": {}}

    def _record(self, stage: str, artifact: str, digest: str, seconds: float | None = None) -> None:
        m = self.manifest()
        m["stages"][stage] = {"done": True, "artifact": artifact, "sha256": digest, "seconds": seconds}
        # a redone stage invalidates everything built on top of it
        stale = [s for s in _dependents(stage) if s in m["stages"]]
        for s in stale:
            del m["stages"][s]
        checkpoint.atomic_write_text(self.manifest_path, json.dumps(m, indent=1, sort_keys=True))

    def require(self, stage: str) -> Path:
        entry = self.manifest()["stages"].get(stage)
        if not entry or not entry.get("done"):
            raise PrerequisiteError(f"missing prerequisite stage '{stage}' in {self.dir}")
        path = self.dir / entry["artifact"]
        if not path.exists():
            raise PrerequisiteError(f"artifact {path.name} of stage '{stage}' is missing")
        if checkpoint.file_hash(path) != entry["sha256"]:
            raise IntegrityError(f"artifact {path.name} does not match the manifest hash")
        return path

    def adopt(self, other: "Run", stage: str) -> Path:
        """Reuse a finished stage of another run (same inputs assumed by the caller)."""
        src = other.require(stage)
        data = src.read_bytes()
        path = self.dir / src.name
        checkpoint.atomic_write_bytes(path, data)
        seconds = other.manifest()["stages"][stage].get("seconds")
        self._record(stage, path.name, hashlib.sha256(data).hexdigest(), seconds)
        return path

    # -- inputs ----------------------------------------------------------------------
    @property
    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.config.corpus, self.config.facts, self.config.seed)
        return self._corpus

    def evaluator(self, metric: str | None = None) -> Evaluator:
        cal = self.config.calibration
        metric = metric or cal.metric
        if metric == "facts":
            return Evaluator("facts", facts=calibration_facts(self.corpus.facts, cal.n_facts, self.config.seed))
        return Evaluator(
            "ppl", tokens=self.corpus.calib, seq_len=self.config.model.max_seq_len, n_tokens=cal.ppl_tokens
        )

    def load_model(self, with_adapter: bool = True) -> ElasticModel:
        arrays, meta = checkpoint.load(self.require("pretrain"))
        cfg = ModelConfig(**meta["config"])
        model = ElasticModel(cfg, {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in arrays.items()})
        entry = self.manifest()["stages"]
        if "calibrate-width" in entry:
            model.attach_width_plan(self.load_width_plan())
        if with_adapter and "finetune" in entry:
            model.attach_bank(self.load_bank(cfg))
        return model

    def load_dp(self) -> DPTable:
        return DPTable.from_json(self.require("calibrate-depth").read_text())

    def load_width_plan(self) -> WidthPlan:
        return WidthPlan.from_json(self.require("calibrate-width").read_text())

    def load_bank(self, cfg: ModelConfig) -> SMoLBank:
        arrays, meta = checkpoint.load(self.require("finetune"))
        bank = self.new_bank(cfg)
        bank.noise = meta["bank"]["noise"]
        bank.load_state(arrays)
        return bank

    def new_bank(self, cfg: ModelConfig) -> SMoLBank:
        ft = self.config.finetune
        return SMoLBank(
            adapted_shapes(cfg),
            self.config.grid.mask_dim,
            n_loras=ft.n_loras,
            rank=ft.rank,
            top_k=ft.top_k,
            noise=ft.noise,
            rng=Rng(self.config.seed).spawn(20),
            dtype=cfg.np_dtype,
        )

    def shapes(self, table: DPTable | None = None) -> dict[tuple[int, int], SubnetShape]:
        table = table or self.load_dp()
        grid, n = self.config.grid, self.config.model.n_layers
        return {(d, w): grid.shape(d, w, table.select(n - grid.depths[d])) for d, w in grid.keys}

    # -- stages ------------------------------------------------------------------------
    def run_pretrain(self, progress=None) -> Path:
        t0 = time.perf_counter()
        c = self.config
        hp = dataclasses.replace(c.pretrain, seed=c.seed)
        model = pretrain(c.model, self.corpus, hp, Rng(c.seed), progress)
        path = self.dir / STAGES["pretrain"]["artifact"]
        digest = checkpoint.save(path, model.state_arrays(), {"config": c.model.to_dict()})
        self._record("pretrain", path.name, digest, time.perf_counter() - t0)
        return path

    def run_calibrate_depth(self, max_remove: int | None = None, metric: str | None = None) -> Path:
        t0 = time.perf_counter()
        n = self.config.model.n_layers
        m = self.config.max_remove if max_remove is None else max_remove
        if not 1 <= m < n:
            raise ConfigError("max_remove", f"need 1 <= M < N, got M={m}, N={n}")
        if m < self.config.max_remove:
            raise ConfigError("max_remove", f"grid needs M >= {self.config.max_remove}")
        model = self.load_model(with_adapter=False)
        model.attach_width_plan(None)
        ev = self.evaluator(metric)
        table = calibrate_depth(model, ev, m)
        path = self.dir / STAGES["calibrate-depth"]["artifact"]
        text = table.to_json()
        checkpoint.atomic_write_text(path, text)
        self._record("calibrate-depth", path.name, hashlib.sha256(text.encode()).hexdigest(), time.perf_counter() - t0)
        return path

    def run_calibrate_width(self) -> Path:
        t0 = time.perf_counter()
        model = self.load_model(with_adapter=False)
        plan = calibrate_width(model, self.corpus, self.config.grid.ratios, self.config.calibration.width_tokens)
        path = self.dir / STAGES["calibrate-width"]["artifact"]
        text = plan.to_json()
        checkpoint.atomic_write_text(path, text)
        self._record("calibrate-width", path.name, hashlib.sha256(text.encode()).hexdigest(), time.perf_counter() - t0)
        return path

    def run_finetune(self, progress=None) -> Path:
        t0 = time.perf_counter()
        for s in STAGES["finetune"]["needs"]:
            self.require(s)
        model = self.load_model(with_adapter=False)
        model.attach_bank(self.new_bank(model.config))
        hp = dataclasses.replace(self.config.finetune, seed=self.config.seed)
        meta = {"bank": model.bank.meta(), "grid": self.config.grid.to_dict()}

        def save_bank(path, step):
            arrays = {k: v.data for k, v in model.bank.parameters().items()}
            return checkpoint.save(path, arrays, {**meta, "step": step})

        def periodic(step):
            save_bank(self.dir / "checkpoints" / f"bank_step{step:06d}.ckpt", step)

        rng = Rng(self.config.seed).spawn(30)
        log = finetune(model, self.config.grid, self.shapes(), self.corpus, hp, rng, progress, periodic)
        checkpoint.atomic_write_text(self.dir / "finetune_log.csv", log.to_csv())
        path = self.dir / STAGES["finetune"]["artifact"]
        digest = save_bank(path, hp.steps)
        self._record("finetune", path.name, digest, time.perf_counter() - t0)
        return path

    def resolve(self, depth: int, ratio: float) -> SubnetShape:
        d, w = self.config.grid.index_of(depth, ratio)
        return self.shapes()[(d, w)]

    def run_extract(self, depth: int, ratio: float) -> Path:
        self.require("finetune")
        model = self.load_model()
        shape = self.resolve(depth, ratio)
        dense = model.extract(shape, self.config.grid)
        path = self.dir / "extracted" / f"d{depth}-w{ratio:.3f}.ckpt"
        checkpoint.save(path, dense.arrays, dense.meta)
        return path

    def run_profile(self, runs: int = 20, warmup: int = 3) -> Path:
        self.require("finetune")
        model = self.load_model()
        rows = profile(model, self.config.grid, self.shapes(), runs=runs, warmup=warmup)
        path = self.dir / "profile.csv"
        checkpoint.atomic_write_text(path, profile_csv(rows))
        return path

    def run_search(self, constraint: str, budget: float, metric: str | None = None) -> Path:
        self.require("finetune")
        model = self.load_model()
        shapes = self.shapes()
        ev = self.evaluator(metric)
        spec = SearchSpec(constraint, budget)
        latency = self.load_latency() if constraint == "max-latency-ms" else None
        res = run_search(model, self.config.grid, shapes, ev, spec, EvalCache(), latency)
        path = self.dir / "search.json"
        checkpoint.atomic_write_text(path, res.to_json(self.config.grid))
        return path

    def load_latency(self) -> dict[tuple[int, int], float]:
        path = self.dir / "profile.csv"
        if not path.exists():
            raise PrerequisiteError("latency search needs 'profile' to have been run")
        grid = self.config.grid
        out = {}
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                if not row["latency_ms_p50"]:
                    raise PrerequisiteError("profile.csv has no latency measurements")
                key = grid.index_of(int(row["depth"]), float(row["width_ratio"]))
                out[key] = float(row["latency_ms_p50"])
        missing = [k for k in grid.keys if k not in out]
        if missing:
            raise PrerequisiteError(f"profile.csv lacks shapes {missing}")
        return out

    def evaluate(self, depth: int, ratio: float) -> dict:
        model = self.load_model()
        shape = self.resolve(depth, ratio)
        c = self.corpus
        return {
            "depth": depth,
            "width_ratio": ratio,
            "ppl": perplexity(model, shape, c.valid, self.config.model.max_seq_len),
            "fact_accuracy": fact_accuracy(model, shape, c.facts),
        }


# -- reusable stage bodies ---------------------------------------------------------------


def calibrate_depth(model: ElasticModel, evaluator: Evaluator, max_remove: int, cache: EvalCache | None = None) -> DPTable:
    cache = cache if cache is not None else EvalCache()

    def score(mask):
        return cached_evaluate(cache, evaluator, model, layer_shape(mask))

    return build_dp(
        score,
        model.config.n_layers,
        max_remove,
        metric=evaluator.kind,
        fingerprint=evaluator.fingerprint(),
    )


def calibrate_width(model: ElasticModel, corpus: Corpus, ratios, n_tokens: int = 4096) -> WidthPlan:
    x, _ = eval_windows(corpus.calib, model.config.max_seq_len, n_tokens)
    return build_width_plan(model, collect_stats(model, [x]), ratios)


def run_search(model, grid, shapes, evaluator, spec: SearchSpec, cache=None, latency=None):
    cache = cache if cache is not None else EvalCache()

    def params_of(key):
        return count_params(model, shapes[key])

    def cost(key):
        if spec.constraint == "max-params":
            return params_of(key)
        if spec.constraint == "max-flops":
            return count_flops(model, shapes[key])
        if latency is None:
            raise ValueError("latency constraint needs measured latencies")
        return latency[key]

    return search(spec, grid, lambda k: cached_evaluate(cache, evaluator, model, shapes[k]), cost, params_of)
