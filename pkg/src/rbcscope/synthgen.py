"""Deterministic synthetic blood-smear scenes with ground truth.

A scene is a light background with a number of *groups* of red cells. A group
is either one isolated cell or a cluster of 2-3 cells that touch or overlap
and therefore form a single connected blob in the mask. Groups keep a clear
gap between their bounding boxes, so every connected region of the mask is
exactly one group.

Cell appearance is absorbance-like: each cell multiplies the background by a
per-channel transmittance, so overlapping cells darken where they stack.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .imgcore import Box, bounding_box, read_pgm_mask, read_ppm, write_pgm_mask, write_ppm

CELL_TYPES = ("oval_disc", "elongated_sickle", "reticulocyte", "granular", "echinocyte", "stomatocyte")
ABNORMAL_TYPES = frozenset(CELL_TYPES[1:])
OVERLAP_MODES = ("separated", "touching", "overlapping", "mixed")

# single-cell : multi-cell patch counts of the clinical dataset
SINGLE_MULTI_RATIO = (1080, 1389)
DEFAULT_TYPE_PROBS = (0.40, 0.12, 0.12, 0.12, 0.12, 0.12)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class CellArchetype:
    """Parameter ranges that define how one cell type looks."""

    cell_type: str
    radius: tuple[float, float]
    axis_ratio: tuple[float, float]
    color: tuple[int, int, int]
    spike_count: tuple[int, int] = (0, 0)
    spike_amp: tuple[float, float] = (0.0, 0.0)
    crescent: tuple[float, float] = (0.0, 0.0)
    pallor: tuple[float, float] = (0.0, 0.0)
    stipple_density: tuple[float, float] = (0.0, 0.0)
    stipple_color: tuple[int, int, int] = (0, 0, 0)
    slit: tuple[float, float] = (0.0, 0.0)


ARCHETYPES = {
    "oval_disc": CellArchetype("oval_disc", (9.0, 12.0), (0.78, 1.0), (206, 112, 116),
                               pallor=(0.35, 0.55)),
    "elongated_sickle": CellArchetype("elongated_sickle", (13.0, 17.0), (0.30, 0.45), (168, 62, 74),
                                      crescent=(0.0, 0.6)),
    "reticulocyte": CellArchetype("reticulocyte", (11.0, 14.0), (0.85, 1.0), (158, 116, 178),
                                  stipple_density=(0.04, 0.07), stipple_color=(92, 62, 150)),
    "granular": CellArchetype("granular", (9.0, 12.0), (0.80, 1.0), (196, 138, 96),
                              stipple_density=(0.12, 0.18), stipple_color=(96, 60, 40)),
    "echinocyte": CellArchetype("echinocyte", (9.0, 12.0), (0.85, 1.0), (214, 92, 88),
                                spike_count=(8, 12), spike_amp=(0.18, 0.28)),
    "stomatocyte": CellArchetype("stomatocyte", (9.0, 12.0), (0.75, 0.95), (200, 104, 128),
                                 slit=(0.14, 0.22)),
}

BACKGROUND = (228, 218, 212)
NOISE_STD = 3.0


@dataclass(frozen=True)
class Cell:
    """Concrete shape and texture parameters of one rendered cell."""

    cell_type: str
    cx: float
    cy: float
    a: float  # semi-major axis
    b: float  # semi-minor axis
    theta: float
    spikes: int = 0
    spike_amp: float = 0.0
    crescent: float = 0.0
    pallor: float = 0.0
    stipple_density: float = 0.0
    slit: float = 0.0
    texture_seed: int = 0

    def moved(self, dx: float, dy: float) -> "Cell":
        return replace(self, cx=self.cx + dx, cy=self.cy + dy)

    def extent(self) -> float:
        return self.a * (1.0 + self.spike_amp) + 1.0

    def window(self) -> Box:
        """Integer box (possibly negative) that contains the footprint."""
        e = self.extent()
        return Box(math.floor(self.cx - e), math.floor(self.cy - e), math.ceil(self.cx + e), math.ceil(self.cy + e))

    def _local(self, xs, ys):
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = xs - self.cx, ys - self.cy
        return dx * c + dy * s, -dx * s + dy * c

    def inside(self, xs, ys):
        u, v = self._local(xs, ys)
        rho = np.hypot(u / self.a, v / self.b)
        bound = 1.0
        if self.spikes:
            phi = np.arctan2(v / self.b, u / self.a)
            bound = 1.0 + self.spike_amp * (0.5 + 0.5 * np.cos(self.spikes * phi)) ** 6
        hit = rho <= bound
        if self.crescent >= 0.3:
            shift = (1.3 - self.crescent) * self.b
            hit &= np.hypot(u / (1.1 * self.a), (v - shift) / self.b) > 1.0
        return hit

    def footprint(self, box: Box | None = None):
        """Footprint sampled on pixel centres of ``box`` (default: its window)."""
        box = box or self.window()
        ys, xs = np.mgrid[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1].astype(np.float64)
        return self.inside(xs, ys)

    def transmittance(self, box: Box) -> np.ndarray:
        """Per-channel multiplier over ``box``; 1.0 outside the footprint."""
        ys, xs = np.mgrid[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1].astype(np.float64)
        inside = self.inside(xs, ys)
        arch = ARCHETYPES[self.cell_type]
        base = np.array(arch.color, dtype=np.float64) / np.array(BACKGROUND, dtype=np.float64)
        t = np.broadcast_to(base, xs.shape + (3,)).copy()
        u, v = self._local(xs, ys)
        rho = np.hypot(u / self.a, v / self.b)
        if self.pallor:
            lift = self.pallor * np.exp(-(rho / 0.45) ** 2)
            t += (1.0 - t) * lift[..., None]
        if self.slit:
            band = (np.abs(v / self.b) < self.slit) & (np.abs(u / self.a) < 0.6)
            t[band] *= 0.62
        if self.spikes:
            t[rho > 0.8] *= 0.9
        if self.stipple_density:
            rng = np.random.default_rng(self.texture_seed)
            dots = rng.random(xs.shape) < self.stipple_density
            dots &= rho < 0.85
            dot_t = np.array(arch.stipple_color, dtype=np.float64) / np.array(BACKGROUND, dtype=np.float64)
            t[dots] = dot_t
        t[~inside] = 1.0
        return t

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sample_cell(cell_type: str, rng: np.random.Generator) -> Cell:
    arch = ARCHETYPES[cell_type]

    def pick(lo_hi):
        lo, hi = lo_hi
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    a = pick(arch.radius)
    spikes = int(rng.integers(arch.spike_count[0], arch.spike_count[1] + 1)) if arch.spike_count[1] else 0
    return Cell(
        cell_type=cell_type,
        cx=0.0,
        cy=0.0,
        a=a,
        b=a * pick(arch.axis_ratio),
        theta=float(rng.uniform(0.0, math.pi)),
        spikes=spikes,
        spike_amp=pick(arch.spike_amp) if spikes else 0.0,
        crescent=pick(arch.crescent),
        pallor=pick(arch.pallor),
        stipple_density=pick(arch.stipple_density),
        slit=pick(arch.slit),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


# ---------------------------------------------------------------------------
# scene specification and layout

@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 256
    cell_count: tuple[int, int] = (6, 10)
    overlap_mode: str = "mixed"
    type_probs: tuple[float, ...] = DEFAULT_TYPE_PROBS
    rng_seed: int = 0
    # fraction of groups that are single cells in mixed mode
    single_fraction: float = SINGLE_MULTI_RATIO[0] / sum(SINGLE_MULTI_RATIO)
    # explicit group plan: one entry per group, each the number of cells in it
    groups: tuple[int, ...] | None = None
    group_gap: int = 10
    max_attempts: int = 400

    def validate(self):
        if len(self.type_probs) != len(CELL_TYPES) or abs(sum(self.type_probs) - 1.0) > 1e-9:
            raise ValueError("type_probs must hold six probabilities summing to 1")
        if min(self.type_probs) < 0:
            raise ValueError("type_probs must be non-negative")
        if self.overlap_mode not in OVERLAP_MODES:
            raise ValueError(f"unknown overlap mode {self.overlap_mode!r}")
        lo, hi = self.cell_count
        if lo < 0 or hi < lo:
            raise ValueError("cell_count range must satisfy 0 <= lo <= hi")
        if self.width < 1 or self.height < 1:
            raise ValueError("scene dimensions must be positive")
        if self.groups is not None and any(g < 1 for g in self.groups):
            raise ValueError("group sizes must be positive")


@dataclass
class Instance:
    cell_type: str
    box: Box
    cell: Cell
    footprint: np.ndarray  # bool, shaped like box, True where the cell covers a pixel

    @property
    def area(self) -> int:
        return int(self.footprint.sum())


@dataclass
class LabeledScene:
    image: np.ndarray
    mask: np.ndarray
    instances: list[Instance] = field(default_factory=list)
    groups: list[tuple[int, ...]] = field(default_factory=list)  # instance indices per group
    scene_id: int = 0


def _plan_groups(spec: SceneSpec, rng: np.random.Generator) -> list[int]:
    if spec.groups is not None:
        return list(spec.groups)
    lo, hi = spec.cell_count
    n = int(rng.integers(lo, hi + 1))
    if spec.overlap_mode == "separated":
        return [1] * n
    plan = []
    left = n
    while left > 0:
        if spec.overlap_mode == "mixed" and rng.random() < spec.single_fraction:
            size = 1
        else:
            size = 2 if rng.random() < 0.7 else 3
        size = min(size, left)
        plan.append(size)
        left -= size
    if spec.overlap_mode != "mixed":
        # fold trailing singletons into the previous cluster
        while len(plan) > 1 and plan[-1] == 1:
            plan.pop()
            plan[-1] += 1
    return plan


def _footprint_on(cells: list[Cell], box: Box) -> list[np.ndarray]:
    return [c.footprint(box) for c in cells]


def _union_box(cells: list[Cell]) -> Box:
    ws = [c.window() for c in cells]
    return Box(min(w.x_min for w in ws), min(w.y_min for w in ws), max(w.x_max for w in ws), max(w.y_max for w in ws))


def _dilate8(fp: np.ndarray) -> np.ndarray:
    out = fp.copy()
    out[1:, :] |= fp[:-1, :]
    out[:-1, :] |= fp[1:, :]
    grown = out.copy()
    out[:, 1:] |= grown[:, :-1]
    out[:, :-1] |= grown[:, 1:]
    return out


def _attach(placed: list[Cell], new: Cell, mode: str, rng: np.random.Generator) -> Cell | None:
    """Slide ``new`` toward a placed cell until it touches (or overlaps) the group."""
    anchor = placed[int(rng.integers(len(placed)))]
    angle = float(rng.uniform(0.0, 2 * math.pi))
    ux, uy = math.cos(angle), math.sin(angle)
    overlap_target = float(rng.uniform(0.12, 0.35))
    d = anchor.extent() + new.extent() + 2.0
    while d > 0:
        cand = replace(new, cx=anchor.cx + ux * d, cy=anchor.cy + uy * d)
        box = _union_box(placed + [cand])
        fps = _footprint_on(placed + [cand], box)
        mine = fps[-1]
        others = np.logical_or.reduce(fps[:-1])
        inter = int(np.sum(mine & others))
        if mode == "touching":
            if inter > 0:
                return None
            if np.any(_dilate8(others) & mine):
                return cand
        else:
            smaller = min(int(mine.sum()), min(int(f.sum()) for f in fps[:-1]))
            if inter >= overlap_target * smaller:
                # no instance may be buried under its neighbours
                if all(np.sum(f & ~np.logical_or.reduce([g for g in fps if g is not f])) > 0.4 * f.sum() for f in fps):
                    return cand
                return None
        d -= 0.5
    return None


def _build_group(types: list[str], mode: str, rng: np.random.Generator, tries: int = 50) -> list[Cell]:
    for _ in range(tries):
        cells = [sample_cell(types[0], rng)]
        ok = True
        for t in types[1:]:
            new = _attach(cells, sample_cell(t, rng), mode, rng)
            if new is None:
                ok = False
                break
            cells.append(new)
        if ok:
            return cells
    raise PlacementError("placement failed")


def generate_scene(spec: SceneSpec) -> LabeledScene:
    """Render one scene; the output depends only on ``spec`` (seed included)."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    plan = _plan_groups(spec, rng)
    probs = np.asarray(spec.type_probs, dtype=np.float64)

    group_cells: list[list[Cell]] = []
    for size in plan:
        types = [CELL_TYPES[i] for i in rng.choice(len(CELL_TYPES), size=size, p=probs)]
        if size == 1:
            mode = "separated"
        elif spec.overlap_mode in ("touching", "overlapping"):
            mode = spec.overlap_mode
        else:
            mode = "touching" if rng.random() < 0.5 else "overlapping"
        group_cells.append(_build_group(types, mode, rng) if size > 1 else [sample_cell(types[0], rng)])

    # place groups: tight union bbox of the footprints, with a clear gap between groups
    placed_boxes: list[Box] = []
    placed: list[list[Cell]] = []
    gap = spec.group_gap
    for cells in group_cells:
        win = _union_box(cells)
        fps = _footprint_on(cells, win)
        ys, xs = np.nonzero(np.logical_or.reduce(fps))
        tight = Box(win.x_min + int(xs.min()), win.y_min + int(ys.min()), win.x_min + int(xs.max()), win.y_min + int(ys.max()))
        w, h = tight.width, tight.height
        if w + 2 > spec.width or h + 2 > spec.height:
            raise PlacementError("placement failed")
        for _ in range(spec.max_attempts):
            x0 = int(rng.integers(1, spec.width - w))
            y0 = int(rng.integers(1, spec.height - h))
            cand = Box(x0, y0, x0 + w - 1, y0 + h - 1)
            if all(cand.x_min > b.x_max + gap or b.x_min > cand.x_max + gap or
                   cand.y_min > b.y_max + gap or b.y_min > cand.y_max + gap for b in placed_boxes):
                dx, dy = x0 - tight.x_min, y0 - tight.y_min
                placed.append([c.moved(dx, dy) for c in cells])
                placed_boxes.append(cand)
                break
        else:
            raise PlacementError("placement failed")

    return render(spec.width, spec.height, placed, rng)


def render(width: int, height: int, groups: list[list[Cell]], rng: np.random.Generator | None = None,
           scene_id: int = 0) -> LabeledScene:
    """Rasterise cell groups into an image, a mask and instance records."""
    rng = rng if rng is not None else np.random.default_rng(0)
    full = Box(0, 0, width - 1, height - 1)
    shade = np.asarray(BACKGROUND, dtype=np.float64) + rng.uniform(-4.0, 4.0, size=3)
    trans = np.ones((height, width, 3))
    mask = np.zeros((height, width), dtype=bool)
    instances: list[Instance] = []
    group_index: list[tuple[int, ...]] = []
    for cells in groups:
        members = []
        for cell in cells:
            win = cell.window()
            clip = Box(max(win.x_min, 0), max(win.y_min, 0), min(win.x_max, full.x_max), min(win.y_max, full.y_max))
            fp = cell.footprint(clip)
            if not fp.any():
                raise PlacementError("placement failed")
            trans[clip.y_min:clip.y_max + 1, clip.x_min:clip.x_max + 1] *= cell.transmittance(clip)
            mask[clip.y_min:clip.y_max + 1, clip.x_min:clip.x_max + 1] |= fp
            ys, xs = np.nonzero(fp)
            box = Box(clip.x_min + int(xs.min()), clip.y_min + int(ys.min()),
                      clip.x_min + int(xs.max()), clip.y_min + int(ys.max()))
            local = fp[box.y_min - clip.y_min:box.y_max - clip.y_min + 1, box.x_min - clip.x_min:box.x_max - clip.x_min + 1]
            members.append(len(instances))
            instances.append(Instance(cell.cell_type, box, cell, local.copy()))
        group_index.append(tuple(members))
    pixels = shade * trans + rng.normal(0.0, NOISE_STD, size=trans.shape)
    image = np.clip(np.floor(pixels + 0.5), 0, 255).astype(np.uint8)
    return LabeledScene(image=image, mask=mask, instances=instances, groups=group_index, scene_id=scene_id)


# ---------------------------------------------------------------------------
# labels

def footprint_in_box(instance: Instance, box: Box) -> int:
    """Number of the instance's footprint pixels that fall inside ``box``."""
    ib = instance.box
    x0, y0 = max(ib.x_min, box.x_min), max(ib.y_min, box.y_min)
    x1, y1 = min(ib.x_max, box.x_max), min(ib.y_max, box.y_max)
    if x0 > x1 or y0 > y1:
        return 0
    sub = instance.footprint[y0 - ib.y_min:y1 - ib.y_min + 1, x0 - ib.x_min:x1 - ib.x_min + 1]
    return int(sub.sum())


def covered_instances(scene: LabeledScene, box: Box, coverage: float = 0.3) -> list[int]:
    return [i for i, inst in enumerate(scene.instances) if footprint_in_box(inst, box) > coverage * inst.area]


def patch_labelset(scene: LabeledScene, box: Box, coverage: float = 0.3) -> frozenset[str]:
    """Cell types whose footprint lies inside ``box`` by more than ``coverage`` of its area."""
    h, w = scene.mask.shape
    if box.x_max >= w or box.y_max >= h or box.x_min < 0 or box.y_min < 0:
        raise ValueError("box exceeds scene")
    return frozenset(scene.instances[i].cell_type for i in covered_instances(scene, box, coverage))


# ---------------------------------------------------------------------------
# datasets on disk

@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 250
    seed: int = 0
    width: int = 256
    height: int = 256
    groups_per_scene: int = 6
    type_probs: tuple[float, ...] = DEFAULT_TYPE_PROBS
    single_fraction: float = SINGLE_MULTI_RATIO[0] / sum(SINGLE_MULTI_RATIO)


def scene_specs(config: DatasetConfig) -> list[SceneSpec]:
    """Per-scene specs whose group plans hit the single:multi quota exactly (up to rounding)."""
    specs = []
    total = singles = 0
    for i in range(config.n_scenes):
        rng = np.random.default_rng([config.seed, i, 1])
        plan = []
        for _ in range(config.groups_per_scene):
            total += 1
            if singles < round(total * config.single_fraction):
                singles += 1
                plan.append(1)
            else:
                plan.append(2 if rng.random() < 0.7 else 3)
        # shuffle so single groups are not always first
        order = rng.permutation(len(plan))
        plan = [plan[j] for j in order]
        specs.append(SceneSpec(width=config.width, height=config.height, overlap_mode="mixed",
                               type_probs=tuple(config.type_probs), rng_seed=_scene_seed(config.seed, i),
                               groups=tuple(plan), cell_count=(sum(plan), sum(plan))))
    return specs


def _scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def generate_scenes(config: DatasetConfig) -> list[LabeledScene]:
    scenes = []
    for i, spec in enumerate(scene_specs(config)):
        scene = generate_scene(spec)
        scene.scene_id = i
        scenes.append(scene)
    return scenes


def _instance_json(inst: Instance) -> dict:
    return {"type": inst.cell_type, "box": list(inst.box), "shape": inst.cell.to_json()}


def generate_dataset(config: DatasetConfig, out_dir) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {out}: {exc}") from exc
    entries = []
    for scene in generate_scenes(config):
        image_rel = f"images/scene_{scene.scene_id:05d}.ppm"
        mask_rel = f"masks/scene_{scene.scene_id:05d}.pgm"
        for rel, writer, data in ((image_rel, write_ppm, scene.image), (mask_rel, write_pgm_mask, scene.mask)):
            try:
                writer(out / rel, data)
            except OSError as exc:
                raise OSError(f"failed writing {out / rel}: {exc}") from exc
        entries.append({
            "id": scene.scene_id,
            "image": image_rel,
            "mask": mask_rel,
            "groups": [list(g) for g in scene.groups],
            "instances": [_instance_json(inst) for inst in scene.instances],
        })
    manifest = {"version": 1, "config": _config_json(config), "scenes": entries}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return path


def _config_json(config: DatasetConfig) -> dict:
    d = {k: getattr(config, k) for k in config.__dataclass_fields__}
    d["type_probs"] = list(d["type_probs"])
    return d


def load_dataset(root) -> list[LabeledScene]:
    """Read a dataset written by :func:`generate_dataset`; footprints are re-rendered from shape records."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}") from exc
    if manifest.get("version") != 1:
        raise ValueError(f"{manifest_path}: unsupported manifest version")
    scenes = []
    for entry in manifest["scenes"]:
        image = read_ppm(root / entry["image"])
        mask = read_pgm_mask(root / entry["mask"])
        instances = []
        for rec in entry["instances"]:
            box = Box(*rec["box"])
            cell = Cell(**rec["shape"])
            instances.append(Instance(rec["type"], box, cell, cell.footprint(box)))
        groups = [tuple(g) for g in entry.get("groups", [[i] for i in range(len(instances))])]
        scenes.append(LabeledScene(image, mask, instances, groups, scene_id=entry["id"]))
    return scenes

