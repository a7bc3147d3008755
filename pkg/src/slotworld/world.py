"""Deterministic 2-D block world.

Side-view world of colored square blocks on a black floor. Blocks live on
integer pixel columns; a pick-and-place action removes the block under the
pick point and drops it from the top of the column at the place point, where
it falls until supported (floor or the top face of another block). There is
no lateral toppling: settling is an instantaneous column drop.

Coordinates: ``x`` is the column index of a block's left edge, ``y`` is the
row index of its bottom edge measured up from the floor. Rendered images are
row-major with row 0 at the top.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

BACKGROUND_LABEL = 0

DEFAULT_PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.1, 0.3, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
)


@dataclass(frozen=True)
class WorldConfig:
    image_size: int = 64
    n_blocks: int = 2
    block_size: int = 12
    palette: tuple = DEFAULT_PALETTE
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.image_size < 2 * self.block_size:
            raise ValueError("image_size must be at least 2 * block_size")
        if len(set(map(tuple, self.palette))) != len(self.palette):
            raise ValueError("palette colors must be distinct")
        if self.n_blocks > len(self.palette):
            raise ValueError("need at least one distinct palette color per block")

    @staticmethod
    def desk(n_blocks: int = 2, seed: int = 0) -> "WorldConfig":
        """Small 32x32 preset used throughout the test suite."""
        return WorldConfig(image_size=32, n_blocks=n_blocks, block_size=8,
                           palette=DEFAULT_PALETTE[:3], seed=seed)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "n_blocks": self.n_blocks,
            "block_size": self.block_size,
            "palette": [list(c) for c in self.palette],
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "WorldConfig":
        known = {"image_size", "n_blocks", "block_size", "palette", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WorldConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "palette" in d:
            d["palette"] = tuple(tuple(float(v) for v in c) for c in d["palette"])
        return WorldConfig(**d)


@dataclass(frozen=True)
class Block:
    color_id: int
    x: int  # left edge, pixels
    y: int  # bottom edge, rows above the floor


@dataclass(frozen=True)
class WorldState:
    config: WorldConfig
    blocks: tuple  # tuple[Block, ...]; index is the stable block id
    stacking_order: tuple  # block ids back-to-front for rendering

    def replace_blocks(self, blocks, stacking_order=None) -> "WorldState":
        order = self.stacking_order if stacking_order is None else tuple(stacking_order)
        return replace(self, blocks=tuple(blocks), stacking_order=order)


@dataclass(frozen=True)
class Action:
    """Pick-and-place action, in coordinate or entity form.

    Coordinate form carries a pick point in pixels; entity form names a slot
    index and is resolved to a pick point by the planner before execution.
    """
    mode: str  # "coordinate" | "entity"
    place: tuple  # (x, y) pixels
    pick: Optional[tuple] = None  # (x, y) pixels, coordinate mode
    entity_id: Optional[int] = None  # slot index, entity mode

    def __post_init__(self):
        if self.mode == "coordinate":
            if self.pick is None:
                raise ValueError("coordinate action requires a pick point")
        elif self.mode == "entity":
            if self.entity_id is None:
                raise ValueError("entity action requires entity_id")
        else:
            raise ValueError(f"unknown action mode {self.mode!r}")

    def validate(self, image_size: int, n_slots: Optional[int] = None) -> None:
        for name, point in (("pick", self.pick), ("place", self.place)):
            if point is None:
                continue
            x, y = point
            if not (0 <= x < image_size and 0 <= y < image_size):
                raise ValueError(f"{name} point {point} outside image bounds")
        if self.mode == "entity" and n_slots is not None:
            if not (0 <= self.entity_id < n_slots):
                raise ValueError(f"entity_id {self.entity_id} out of range")


@dataclass
class Trajectory:
    """A rollout of (image, action) pairs; gt label maps are evaluation-only."""
    images: np.ndarray  # (T+1, H, W, 3) float32 in [0, 1]
    actions: list  # list[Action], length T
    gt_masks: Optional[np.ndarray] = None  # (T+1, H, W) uint8 labels

    def __post_init__(self):
        if len(self.images) != len(self.actions) + 1:
            raise ValueError("need len(images) == len(actions) + 1")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("image pixel values must lie in [0, 1]")


def _footprint_overlap(ax: int, bx: int, size: int) -> bool:
    return ax < bx + size and bx < ax + size


def _column_top(blocks: Sequence[Block], x: int, size: int, skip: int = -1) -> int:
    """Highest occupied top face in the column at x; 0 for the bare floor."""
    top = 0
    for j, b in enumerate(blocks):
        if j == skip:
            continue
        if _footprint_overlap(b.x, x, size):
            top = max(top, b.y + size)
    return top


def _support_height(blocks: Sequence[Block], i: int, size: int, skip: int = -1) -> int:
    """Highest top face at or below block i's bottom among overlapping blocks."""
    me = blocks[i]
    top = 0
    for j, b in enumerate(blocks):
        if j == i or j == skip:
            continue
        if _footprint_overlap(b.x, me.x, size) and b.y + size <= me.y:
            top = max(top, b.y + size)
    return top


def _settle_list(blocks: list, size: int, skip: int = -1) -> list:
    """Drop unsupported blocks straight down, lowest first, until stable.

    Block `skip` is held out of play (neither moved nor supporting).
    """
    blocks = list(blocks)
    for _ in range(len(blocks) + 1):
        moved = False
        for i in sorted(range(len(blocks)), key=lambda j: blocks[j].y):
            if i == skip:
                continue
            rest = _support_height(blocks, i, size, skip=skip)
            if rest < blocks[i].y:
                blocks[i] = replace(blocks[i], y=rest)
                moved = True
        if not moved:
            break
    return blocks


def _settle(state: WorldState) -> WorldState:
    return state.replace_blocks(_settle_list(list(state.blocks), state.config.block_size))


def is_settled(state: WorldState) -> bool:
    size = state.config.block_size
    return all(b.y == _support_height(state.blocks, i, size)
               for i, b in enumerate(state.blocks))


def floor_layout(rng: np.random.Generator, n: int, image_size: int,
                 block_size: int) -> list:
    """n random non-overlapping left edges on the floor, uniform over layouts."""
    free = image_size - n * block_size
    if free < 0:
        raise ValueError("blocks cannot fit on the floor without overlap")
    ys = np.sort(rng.integers(0, free + 1, size=n))
    xs = ys + np.arange(n) * block_size
    return [int(x) for x in rng.permutation(xs)]


def init_world(config: WorldConfig, rng_seed: int) -> WorldState:
    """Place n_blocks at random non-overlapping floor positions."""
    rng = np.random.default_rng(rng_seed)
    color_ids = rng.choice(len(config.palette), size=config.n_blocks, replace=False)
    xs = floor_layout(rng, config.n_blocks, config.image_size, config.block_size)
    blocks = tuple(Block(color_id=int(c), x=x, y=0) for c, x in zip(color_ids, xs))
    return WorldState(config=config, blocks=blocks,
                      stacking_order=tuple(range(config.n_blocks)))


def _block_at_point(state: WorldState, px: float, py: float) -> Optional[int]:
    """Id of the front-most block whose footprint contains the pixel, if any."""
    size = state.config.block_size
    H = state.config.image_size
    hit = None
    for bid in state.stacking_order:  # back to front; keep the last hit
        b = state.blocks[bid]
        row_top = H - size - b.y  # image row of the block's top edge
        if b.x <= px < b.x + size and row_top <= py < row_top + size:
            hit = bid
    return hit


def step(state: WorldState, action: Action) -> WorldState:
    """Apply a pick/place. Picks that miss every block are no-ops."""
    if action.mode != "coordinate":
        raise ValueError("step requires a coordinate action; resolve entity first")
    action.validate(state.config.image_size)
    picked = _block_at_point(state, *action.pick)
    if picked is None:
        return state
    size = state.config.block_size
    # Remove, let anything stacked above fall, then drop at the place column.
    blocks = _settle_list(list(state.blocks), size, skip=picked)
    new_x = int(np.clip(round(action.place[0] - size / 2), 0, state.config.image_size - size))
    rest = _column_top(blocks, new_x, size, skip=picked)
    blocks[picked] = Block(color_id=blocks[picked].color_id, x=new_x, y=rest)
    order = tuple([bid for bid in state.stacking_order if bid != picked] + [picked])
    return state.replace_blocks(blocks, stacking_order=order)


def render(state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Painter's-algorithm composite and per-pixel block-id label map.

    Returns (image (H, W, 3) float32 in [0,1], label_map (H, W) uint8) where
    label 0 is background and block id b is labeled b + 1.
    """
    cfg = state.config
    H = W = cfg.image_size
    size = cfg.block_size
    image = np.zeros((H, W, 3), dtype=np.float32)
    labels = np.full((H, W), BACKGROUND_LABEL, dtype=np.uint8)
    for bid in state.stacking_order:
        b = state.blocks[bid]
        row_top = H - size - b.y
        r0, r1 = max(row_top, 0), min(row_top + size, H)
        c0, c1 = max(b.x, 0), min(b.x + size, W)
        if r0 >= r1 or c0 >= c1:
            continue  # settled states never clip; guard for synthetic ones
        image[r0:r1, c0:c1] = cfg.palette[b.color_id]
        labels[r0:r1, c0:c1] = bid + 1
    return image, labels


def _random_point_in_block(rng: np.random.Generator, state: WorldState, bid: int) -> tuple:
    size = state.config.block_size
    H = state.config.image_size
    b = state.blocks[bid]
    row_top = H - size - b.y
    px = float(b.x + rng.uniform(0, size - 1e-6))
    py = float(row_top + rng.uniform(0, size - 1e-6))
    return px, py


def _uniform_point(rng: np.random.Generator, image_size: int) -> tuple:
    return (float(rng.uniform(0, image_size - 1e-6)),
            float(rng.uniform(0, image_size - 1e-6)))


def _sample_biased(state: WorldState, rng: np.random.Generator) -> tuple[Action, int]:
    """Biased action sampler; returns (action, branch).

    Branches: 0 = valid pick + random place (p=0.3), 1 = valid pick + place on
    top of another block (p=0.4), 2 = fully random pick and place (p=0.3).
    One-block states fall back from branch 1 to branch 0.
    """
    cfg = state.config
    u = rng.random()
    branch = 0 if u < 0.3 else (1 if u < 0.7 else 2)
    if branch == 1 and len(state.blocks) < 2:
        branch = 0
    if branch == 2:
        pick = _uniform_point(rng, cfg.image_size)
        place = _uniform_point(rng, cfg.image_size)
    else:
        bid = int(rng.integers(0, len(state.blocks)))
        pick = _random_point_in_block(rng, state, bid)
        if branch == 1:
            others = [i for i in range(len(state.blocks)) if i != bid]
            other = state.blocks[others[int(rng.integers(0, len(others)))]]
            place = (float(other.x + cfg.block_size / 2),
                     float(rng.uniform(0, cfg.image_size - 1e-6)))
        else:
            place = _uniform_point(rng, cfg.image_size)
    return Action(mode="coordinate", pick=pick, place=place), branch


def sample_biased_action(state: WorldState, rng: np.random.Generator) -> Action:
    return _sample_biased(state, rng)[0]


def rollout_trajectory(config: WorldConfig, horizon: int, rng_seed: int,
                       with_gt: bool = True) -> Trajectory:
    """Fresh world plus `horizon` biased actions, rendered at every step."""
    rng = np.random.default_rng(rng_seed)
    state = init_world(config, int(rng.integers(0, 2**31 - 1)))
    images, labels, actions = [], [], []
    img, lab = render(state)
    images.append(img)
    labels.append(lab)
    for _ in range(horizon):
        action = sample_biased_action(state, rng)
        state = step(state, action)
        actions.append(action)
        img, lab = render(state)
        images.append(img)
        labels.append(lab)
    gt = np.stack(labels) if with_gt else None
    return Trajectory(images=np.stack(images), actions=actions, gt_masks=gt)


def block_centers(state: WorldState) -> np.ndarray:
    """(n_blocks, 2) array of (col, row) block centers in image coordinates."""
    cfg = state.config
    out = np.zeros((len(state.blocks), 2), dtype=np.float64)
    for i, b in enumerate(state.blocks):
        out[i, 0] = b.x + cfg.block_size / 2
        out[i, 1] = cfg.image_size - cfg.block_size - b.y + cfg.block_size / 2
    return out


def evaluate_build(state: WorldState, goal: WorldState, tol: float) -> float:
    """Fraction of goal blocks matched by a same-colored block within tol pixels.

    Greedy matching: same-color (goal, state) pairs are matched in order of
    increasing center distance, consuming both sides.
    """
    if state.config.palette != goal.config.palette:
        raise ValueError("states must share a palette")
    sc = block_centers(state)
    gc = block_centers(goal)
    pairs = []
    for gi, gb in enumerate(goal.blocks):
        for si, sb in enumerate(state.blocks):
            if sb.color_id != gb.color_id:
                continue
            d = float(np.linalg.norm(sc[si] - gc[gi]))
            if d <= tol:
                pairs.append((d, gi, si))
    pairs.sort()
    used_g, used_s = set(), set()
    matched = 0
    for _, gi, si in pairs:
        if gi in used_g or si in used_s:
            continue
        used_g.add(gi)
        used_s.add(si)
        matched += 1
    return matched / len(goal.blocks)
