"""Cached observations and labels for a list of scenes."""

from __future__ import annotations

import numpy as np
import torch

from .fusion import AnchorGrid, assign_targets
from .scene import Scene, observe, visible_objects
from .zoo import AgentSpec


class SceneCache:
    """Observations per (agent, slot, frame) stacked over scenes, computed lazily."""

    def __init__(self, scenes: list[Scene], seed: int = 0):
        self.scenes = scenes
        self.seed = seed
        self._obs: dict[tuple, torch.Tensor] = {}
        self._vis: dict[tuple, list[np.ndarray]] = {}

    def __len__(self):
        return len(self.scenes)

    def obs(self, spec: AgentSpec, slot: int, frame: int = 0) -> torch.Tensor:
        key = (spec.agent_id, spec.obs_hw, spec.fov_kind, spec.noise_profile_id, spec.max_range_m, slot, frame)
        if key not in self._obs:
            grids = [observe(s, spec, self.seed, slot=slot, frame=frame).occupancy for s in self.scenes]
            self._obs[key] = torch.from_numpy(np.stack(grids)).unsqueeze(1)
        return self._obs[key]

    def visible(self, spec: AgentSpec, slot: int, frame: int = 0) -> list[np.ndarray]:
        key = (spec.obs_hw, spec.fov_kind, spec.max_range_m, slot, frame)
        if key not in self._vis:
            self._vis[key] = [visible_objects(s, spec, slot, frame) for s in self.scenes]
        return self._vis[key]

    def boxes(self, index: int, frame: int = 0) -> np.ndarray:
        objs = self.scenes[index].objects_at(frame)
        return np.array([o.as_array()[:5] for o in objs], dtype=np.float64).reshape(-1, 5)

    def label_boxes(self, index: int, roster: list[tuple[AgentSpec, int]], frame: int = 0) -> np.ndarray:
        """Boxes seen by at least one (spec, slot) in ``roster``."""
        boxes = self.boxes(index, frame)
        seen = np.zeros(len(boxes), dtype=bool)
        for spec, slot in roster:
            seen |= self.visible(spec, slot, frame)[index]
        return boxes[seen]

    def targets(self, indices, roster_per_item, anchors: AnchorGrid, frame: int = 0):
        labels, regs = [], []
        for i, roster in zip(indices, roster_per_item):
            lab, reg = assign_targets(self.label_boxes(i, roster, frame), anchors)
            labels.append(lab)
            regs.append(reg)
        return torch.from_numpy(np.stack(labels)), torch.from_numpy(np.stack(regs))
