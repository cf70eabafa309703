"""Configuration and stage orchestration for the full reconstruction pipeline.

Stages run in a fixed order. Each one is keyed by a content hash of its
config subsection and the keys of the stages it depends on; when a stage's
manifest on disk carries the same key, its outputs are loaded instead of
recomputed. Downstream stages always read upstream results back from disk,
so a cache hit and a fresh computation feed them identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .field import load_checkpoint, save_checkpoint
from .geom import OrientedBox, PointCloud3, RigidPose, fit_obb, read_ply, write_ply
from .io import write_csv, write_json
from .mesh import read_obj, write_obj
from .recon import evaluate_object, extract_mesh
from .regist import SubcategoryAssignment, subcategorize, subcategory_boxes, write_registration_report
from .render import TrainConfig, category_pixels_per_iter, field_box, train_category_model, train_object_model
from .synth import SceneSpec, back_project, build_scene, export_frames, render_sequence
from .uncert import Candidate, ReliabilityParams, select_representative, write_uncertainty_csv

log = logging.getLogger(__name__)

STAGES = ("synth", "object_train", "representative", "register", "subcategorize", "category_train", "mesh", "metrics")
OBJECT_LEVEL = "object-level"
CATEGORY = "category"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    def report(self) -> dict:
        return {"status": "error", "stage": self.stage, "error": type(self.cause).__name__, "message": str(self.cause)}


# ---------------------------------------------------------------------------
# configuration


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StageToggles(_Section):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    synth: bool = True
    object_train: bool = True
    representative: bool = True
    register_: bool = Field(True, alias="register")  # "register" is taken by the model base class
    subcategorize: bool = True
    category_train: bool = True
    mesh: bool = True
    metrics: bool = True

    def enabled(self) -> list[str]:
        return [s for s in STAGES if getattr(self, "register_" if s == "register" else s)]


class TrainSection(_Section):
    iterations: int = Field(2000, ge=0)
    pixels_per_iter: int = Field(120, ge=1)
    n_samples: int = Field(10, ge=2)
    sigma_d: float = Field(0.03, gt=0)
    lambda_color: float = Field(5.0, ge=0)
    lambda_opacity: float = Field(10.0, ge=0)
    lambda_reg: float = Field(5e-4, ge=0)
    lr: float = Field(1e-3, gt=0)
    code_lr: float = Field(1e-3, gt=0)
    bbox_pad: int = Field(2, ge=0)

    def to_train_config(self, seed: int, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.model_dump(), "seed": seed, **overrides})


class CategorySection(_Section):
    iterations: Optional[int] = Field(None, ge=0)  # defaults to the object-level count


class RepresentativeSection(_Section):
    method: Literal["uncertainty", "random"] = "uncertainty"
    alpha_u: float = Field(1.0, gt=0)
    m1: float = 0.1
    m2: float = 0.15
    M1: float = 0.57
    M2: float = 0.65
    kappa: float = Field(0.9, gt=0.5, lt=1)
    eta_rep: float = Field(0.5, gt=0, lt=1)
    n_dirs: int = Field(512, ge=8)
    n_samples: int = Field(96, ge=8)

    def params(self) -> ReliabilityParams:
        return ReliabilityParams(self.alpha_u, self.m1, self.m2, self.M1, self.M2, self.kappa, self.eta_rep)

    @model_validator(mode="after")
    def _band(self):
        self.params()
        return self


class RegistrationSection(_Section):
    eta_sub: float = Field(0.12, gt=0)
    subcategorize: bool = True
    max_points: int = Field(2000, ge=10)


class MeshSection(_Section):
    resolution: int = Field(64, ge=16)


class MetricsSection(_Section):
    n_samples: int = Field(10_000, ge=100)


class PipelineConfig(_Section):
    scene: Union[str, SceneSpec]
    outdir: str = "outputs"
    seed: int = Field(0, ge=0)
    method: Literal["category", "object-level"] = CATEGORY
    stages: StageToggles = Field(default_factory=StageToggles)
    train: TrainSection = Field(default_factory=TrainSection)
    category: CategorySection = Field(default_factory=CategorySection)
    representative: RepresentativeSection = Field(default_factory=RepresentativeSection)
    registration: RegistrationSection = Field(default_factory=RegistrationSection)
    mesh: MeshSection = Field(default_factory=MeshSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        """Read a YAML or JSON config; relative paths resolve against the config's directory."""
        path = Path(path)
        text = path.read_text()
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        for key in ("scene", "outdir"):
            if isinstance(data.get(key), str) and not Path(data[key]).is_absolute():
                data[key] = str(path.parent / data[key])
        return cls.model_validate(data)

    @model_validator(mode="after")
    def _scene_exists(self):
        if isinstance(self.scene, str) and not Path(self.scene).is_file():
            raise ValueError(f"scene spec {self.scene!r} does not exist")
        return self

    def scene_spec(self) -> SceneSpec:
        return SceneSpec.load(self.scene) if isinstance(self.scene, str) else self.scene

    @property
    def tag(self) -> str:
        """Name of this run's method variant, used for its output subdirectories."""
        if self.method == OBJECT_LEVEL:
            return OBJECT_LEVEL
        parts = [CATEGORY]
        if self.representative.method == "random":
            parts.append("rep_random")
        if not self.registration.subcategorize:
            parts.append("subcat_off")
        return "-".join(parts)


def _digest(*items) -> str:
    blob = json.dumps(items, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stage bookkeeping


@dataclass
class StageRecord:
    name: str
    key: str
    cached: bool


class Pipeline:
    """Lazily computed, cached stages of one run."""

    def __init__(self, config: PipelineConfig):
        self.cfg = config
        self.out = Path(config.outdir)
        self.records: list[StageRecord] = []
        self._memo: dict[str, object] = {}
        self._keys: dict[str, str] = {}

    # -- helpers ----------------------------------------------------------

    def _dir(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _manifest(self, stage: str) -> Path:
        return self._dir("manifests") / f"{stage}-{self.cfg.tag}.json" if stage in self._tagged else \
            self._dir("manifests") / f"{stage}.json"

    # stages whose outputs depend on the method variant
    _tagged = {"representative", "register", "subcategorize", "category_train", "metrics"}

    def _cached(self, stage: str, key: str) -> bool:
        m = self._manifest(stage)
        if not m.is_file():
            return False
        data = json.loads(m.read_text())
        return data.get("key") == key and all((self.out / p).exists() for p in data.get("outputs", []))

    def _commit(self, stage: str, key: str, outputs) -> None:
        rel = sorted(str(Path(p).relative_to(self.out)) for p in outputs)
        write_json(self._manifest(stage), {"stage": stage, "key": key, "outputs": rel})

    def _run(self, stage: str, key: str, compute, load):
        if stage in self._memo:
            return self._memo[stage]
        self._keys[stage] = key
        try:
            hit = self._cached(stage, key)
            if not hit:
                log.info("running stage %s", stage)
                self._commit(stage, key, compute())
            else:
                log.info("stage %s cached", stage)
            result = load()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - converted into a stage report
            raise StageError(stage, exc) from exc
        self.records.append(StageRecord(stage, key, hit))
        self._memo[stage] = result
        return result

    # -- synth ------------------------------------------------------------

    def synth(self):
        spec = self.cfg.scene_spec()
        key = _digest("synth", spec.model_dump(mode="json"))
        frames_dir, clouds_dir = self.out / "frames", self.out / "clouds"
        state = {}

        def build():
            if "scene" not in state:
                scene = build_scene(spec)
                frames = render_sequence(scene)
                obs = {o.instance_id: back_project(frames, o.instance_id, scene) for o in scene.objects}
                state.update(scene=scene, frames=frames, obs=obs)
            return state

        def compute():
            s = build()
            export_frames(s["frames"], self._dir("frames"))
            outs = [frames_dir / "cameras.json"]
            index = []
            for oid, ob in sorted(s["obs"].items()):
                p = self._dir("clouds") / f"obj_{oid}.ply"
                write_ply(p, ob.cloud)
                outs.append(p)
                index.append({"instance": oid, "class": ob.semantic_class, "n_points": ob.cloud.count,
                              "n_frames": len(ob.frames)})
            write_json(clouds_dir / "objects.json", index)
            gt_dir = self._dir("meshes/gt")
            for obj in s["scene"].objects:
                write_obj(gt_dir / f"obj_{obj.instance_id}.obj", obj.mesh)
                outs.append(gt_dir / f"obj_{obj.instance_id}.obj")
            return outs + [clouds_dir / "objects.json"]

        def load():
            s = build()
            # observations carry the clouds as stored on disk
            for oid, ob in s["obs"].items():
                ob.cloud = read_ply(clouds_dir / f"obj_{oid}.ply")
            return s

        return self._run("synth", key, compute, load)

    # -- object-level training -------------------------------------------

    def object_train(self) -> dict[int, tuple]:
        s = self.synth()
        key = _digest("object_train", self._keys["synth"], self.cfg.train.model_dump(), self.cfg.seed)
        mdir = self.out / "models" / OBJECT_LEVEL

        def compute():
            outs = []
            self._dir(f"models/{OBJECT_LEVEL}")
            for oid, ob in sorted(s["obs"].items()):
                box = field_box(fit_obb(ob.cloud))
                res = train_object_model(s["frames"], ob, box, self.cfg.train.to_train_config(self.cfg.seed))
                save_checkpoint(mdir / f"obj_{oid}.ckpt", res.model)
                final = res.log[-1] if res.log else {}
                write_json(mdir / f"obj_{oid}.json", {"instance": oid, "box": box.to_dict(), "final": final})
                outs += [mdir / f"obj_{oid}.ckpt", mdir / f"obj_{oid}.json"]
            return outs

        def load():
            models = {}
            for oid in sorted(s["obs"]):
                model, _ = load_checkpoint(mdir / f"obj_{oid}.ckpt")
                box = OrientedBox.from_dict(json.loads((mdir / f"obj_{oid}.json").read_text())["box"])
                models[oid] = (model, box)
            return models

        return self._run("object_train", key, compute, load)

    # -- representatives ---------------------------------------------------

    def _classes(self) -> dict[str, list[int]]:
        groups: dict[str, list[int]] = {}
        for oid, ob in sorted(self.synth()["obs"].items()):
            groups.setdefault(ob.semantic_class, []).append(oid)
        return groups

    def _candidates(self, ids) -> list[Candidate]:
        s, models = self.synth(), self.object_train()
        return [Candidate(i, models[i][0], models[i][1], s["obs"][i].cloud) for i in ids]

    def _choose(self, class_index: int, ids, salt: int = 0):
        rc = self.cfg.representative
        rng = np.random.default_rng([self.cfg.seed, class_index, salt])
        return select_representative(self._candidates(ids), rc.params(), rc.n_dirs, rc.n_samples, rc.method, rng)

    def representative(self) -> dict[str, int]:
        self.object_train()
        rc = self.cfg.representative
        key = _digest("representative", self._keys["object_train"], rc.model_dump(), self.cfg.seed)
        rdir = self.out / "registration" / self.cfg.tag

        def compute():
            self._dir(f"registration/{self.cfg.tag}")
            choice, outs = {}, []
            for k, (cls, ids) in enumerate(sorted(self._classes().items())):
                pick = self._choose(k, ids)
                choice[cls] = {"representative": pick.instance_id, "method": pick.method,
                               "scores": {str(i): v for i, v in sorted(pick.scores.items())}}
                for oid, bundle in sorted(pick.bundles.items()):
                    p = rdir / f"uncertainty_{oid}.csv"
                    write_uncertainty_csv(p, bundle)
                    outs.append(p)
            write_json(rdir / "representatives.json", choice)
            return outs + [rdir / "representatives.json"]

        def load():
            data = json.loads((rdir / "representatives.json").read_text())
            return {cls: v["representative"] for cls, v in data.items()}

        return self._run("representative", key, compute, load)

    # -- registration and subcategories -----------------------------------

    def _assign(self, stage: str, enabled: bool) -> dict[str, SubcategoryAssignment]:
        reps = self.representative()
        upstream = self._keys["representative"]
        rg = self.cfg.registration
        key = _digest(stage, upstream, rg.model_dump(), enabled, self.cfg.seed)
        rdir = self.out / "registration" / self.cfg.tag
        clouds = {i: ob.cloud for i, ob in self.synth()["obs"].items()}
        state = {}

        def compute():
            self._dir(f"registration/{self.cfg.tag}")
            outs = []
            for k, (cls, ids) in enumerate(sorted(self._classes().items())):
                salt = iter(range(1, 1 << 30))
                choose = lambda left, k=k: self._choose(k, left, next(salt)).instance_id  # noqa: E731
                a = subcategorize({i: clouds[i] for i in ids}, reps[cls], rg.eta_sub, choose, enabled, rg.max_points)
                state[cls] = a
                p = rdir / f"{stage}_{cls}.json"
                write_registration_report(p, cls, a)
                outs.append(p)
            return outs

        def load():
            return {cls: _read_assignment(rdir / f"{stage}_{cls}.json", clouds) for cls in sorted(self._classes())}

        return self._run(stage, key, compute, load)

    def register(self):
        """Every object aligned to its category representative, without splitting."""
        return self._assign("register", False)

    def subcategorize(self):
        if not self.cfg.registration.subcategorize:
            return self._assign("subcategorize", False)
        return self._assign("subcategorize", True)

    # -- category training -------------------------------------------------

    def category_train(self):
        assigns = self.subcategorize()
        s = self.synth()
        clouds = {i: ob.cloud for i, ob in s["obs"].items()}
        cat_iters = self.cfg.category.iterations
        key = _digest("category_train", self._keys["subcategorize"], self.cfg.train.model_dump(),
                      self.cfg.category.model_dump(), self.cfg.seed)
        mdir = self.out / "models" / self.cfg.tag
        groups = [(cls, sub) for cls, a in sorted(assigns.items()) for sub in range(a.n_subcategories)]
        n_objects = len(s["obs"])

        def compute():
            self._dir(f"models/{self.cfg.tag}")
            outs = []
            overrides = {"pixels_per_iter": category_pixels_per_iter(n_objects, len(groups), self.cfg.train.pixels_per_iter)}
            if cat_iters is not None:
                overrides["iterations"] = cat_iters
            tc = self.cfg.train.to_train_config(self.cfg.seed, **overrides)
            for cls, sub in groups:
                a = assigns[cls]
                boxes = subcategory_boxes(a, clouds)
                ids = a.members(sub)
                members = [(s["obs"][i], field_box(boxes[i])) for i in ids]
                res = train_category_model(s["frames"], members, tc)
                stem = mdir / f"{cls}_{sub}"
                save_checkpoint(stem.with_suffix(".ckpt"), res.model, res.codes)
                write_json(stem.with_suffix(".json"), {
                    "class": cls, "subcategory": sub, "members": ids,
                    "boxes": {str(i): field_box(boxes[i]).to_dict() for i in ids},
                    "final": res.log[-1] if res.log else {},
                })
                outs += [stem.with_suffix(".ckpt"), stem.with_suffix(".json")]
            return outs

        def load():
            out = {}
            for cls, sub in groups:
                stem = mdir / f"{cls}_{sub}"
                model, codes = load_checkpoint(stem.with_suffix(".ckpt"))
                info = json.loads(stem.with_suffix(".json").read_text())
                for i in info["members"]:
                    out[i] = (model, codes.code(i), OrientedBox.from_dict(info["boxes"][str(i)]), cls, sub)
            return out

        return self._run("category_train", key, compute, load)

    # -- meshes and metrics -----------------------------------------------

    def _mesh_stage(self, tag: str, upstream: str, sources: dict):
        res = self.cfg.mesh.resolution
        key = _digest("mesh", tag, self._keys[upstream], self.cfg.mesh.model_dump())
        mdir = self.out / "meshes" / tag
        stage = f"mesh_{tag}"

        def compute():
            self._dir(f"meshes/{tag}")
            outs = []
            for oid, (model, code, box) in sorted(sources.items()):
                p = mdir / f"obj_{oid}.obj"
                write_obj(p, extract_mesh(model, code, box, res, source_id=oid))
                outs.append(p)
            return outs

        def load():
            return {oid: read_obj(mdir / f"obj_{oid}.obj") for oid in sorted(sources)}

        return self._run(stage, key, compute, load)

    def baseline_meshes(self):
        models = self.object_train()
        return self._mesh_stage(OBJECT_LEVEL, "object_train", {i: (m, None, b) for i, (m, b) in models.items()})

    def mesh(self):
        if self.cfg.method == OBJECT_LEVEL:
            return self.baseline_meshes()
        cat = self.category_train()
        return self._mesh_stage(self.cfg.tag, "category_train", {i: v[:3] for i, v in cat.items()})

    def metrics(self) -> list[dict]:
        meshes = self.mesh()
        base = self.baseline_meshes()
        s = self.synth()
        tag = self.cfg.tag
        subs = {}
        if self.cfg.method != OBJECT_LEVEL:
            subs = {i: v[4] for i, v in self.category_train().items()}
        key = _digest("metrics", self._keys[f"mesh_{tag}"], self._keys[f"mesh_{OBJECT_LEVEL}"],
                      self.cfg.metrics.model_dump(), self.cfg.seed)
        path = self.out / "metrics" / f"{tag}.json"

        def compute():
            self._dir("metrics")
            rows = []
            scene = s["scene"]
            for oid in sorted(meshes):
                obj = scene.object(oid)
                n = self.cfg.metrics.n_samples
                m = evaluate_object(meshes[oid], obj.mesh, None, n, [self.cfg.seed, oid])
                crop = fit_obb(base[oid].vertices)
                try:
                    cropped = evaluate_object(meshes[oid], obj.mesh, crop, n, [self.cfg.seed, oid]).acc_cm
                except ValueError:
                    cropped = None
                rows.append({
                    "scene": scene.spec.name, "instance": oid, "class": obj.semantic_class,
                    "subcategory": subs.get(oid, 0), "method": tag, **m.as_dict(), "acc_cropped_cm": cropped,
                })
            write_json(path, rows)
            return [path]

        def load():
            return json.loads(path.read_text())

        return self._run("metrics", key, compute, load)

    # -- driver -----------------------------------------------------------

    _dispatch = {
        "synth": "synth",
        "object_train": "object_train",
        "representative": "representative",
        "register": "register",
        "subcategorize": "subcategorize",
        "category_train": "category_train",
        "mesh": "mesh",
        "metrics": "metrics",
    }
    _category_only = {"representative", "register", "subcategorize", "category_train"}

    def run(self, stages: Optional[list[str]] = None) -> list[StageRecord]:
        """Run the requested stages (default: the enabled toggles) plus whatever they need."""
        todo = self.cfg.stages.enabled() if stages is None else stages
        for name in STAGES:
            if name not in todo:
                continue
            if self.cfg.method == OBJECT_LEVEL and name in self._category_only:
                continue
            getattr(self, self._dispatch[name])()
        return self.records


def _read_assignment(path: Path, clouds: dict[int, PointCloud3]) -> SubcategoryAssignment:
    from .regist import RegistrationResult

    data = json.loads(path.read_text())
    labels, regs = {}, {}
    for rec in data["objects"]:
        oid = rec["id"]
        labels[oid] = rec["subcategory"]
        M = np.array(rec["pose"], dtype=np.float64).reshape(3, 4)
        pose = RigidPose(M[:, :3], M[:, 3])
        regs[oid] = RegistrationResult(oid, rec["representative"], pose, None, float("nan"), rec["normalized_cd"])
    return SubcategoryAssignment(labels, list(data["representatives"]), regs)


def run_pipeline(config: PipelineConfig, stages: Optional[list[str]] = None) -> dict:
    """Run the pipeline and write ``status.json``; stage failures are reported, not raised."""
    out = Path(config.outdir)
    out.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(config)
    try:
        records = pipe.run(stages)
    except StageError as err:
        status = err.report()
        write_json(out / "status.json", status)
        return status
    status = {"status": "ok", "method": config.tag,
              "stages": [{"stage": r.name, "key": r.key, "cached": r.cached} for r in records]}
    write_json(out / "status.json", status)
    return status


# ---------------------------------------------------------------------------
# reporting


class MissingMetricsError(FileNotFoundError):
    pass


REPORT_FIELDS = ("acc_cm", "comp_cm", "cr_pct")


def load_metrics(outdir) -> list[dict]:
    mdir = Path(outdir) / "metrics"
    files = sorted(mdir.glob("*.json")) if mdir.is_dir() else []
    rows = []
    for f in files:
        data = json.loads(f.read_text() or "[]")
        rows += data
    if not rows:
        raise MissingMetricsError(f"no metrics rows under {mdir}")
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Per (method, scene, class) means plus a per (method, scene) 'all' row."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["scene"], r["class"]), []).append(r)
        groups.setdefault((r["method"], r["scene"], "all"), []).append(r)
    out = []
    for (method, scene, cls), members in sorted(groups.items()):
        rec = {"method": method, "scene": scene, "class": cls, "n": len(members)}
        for f in REPORT_FIELDS:
            rec[f] = float(np.mean([m[f] for m in members]))
        out.append(rec)
    return out


def format_table(summary: list[dict]) -> str:
    header = ["method", "scene", "class", "n", *REPORT_FIELDS]
    cells = [header] + [
        [r["method"], r["scene"], r["class"], str(r["n"])] + [f"{r[f]:.2f}" for f in REPORT_FIELDS] for r in summary
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report(outdir) -> tuple[str, Path]:
    summary = aggregate(load_metrics(outdir))
    csv_path = Path(outdir) / "metrics" / "summary.csv"
    header = ["method", "scene", "class", "n", *REPORT_FIELDS]
    write_csv(csv_path, header, [[r[h] for h in header] for r in summary])
    return format_table(summary), csv_path
