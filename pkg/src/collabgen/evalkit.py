"""Evaluation: AP reports, ablations, the adapter comparison, cost tables and plots."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .comm import CollaborationGraph, NoiseSpec, comm_volume_log2, run_episodes, HEADER
from .cost import CostReport, ParameterPartition, count_cost
from .dme import ExtractorRegistry
from .fusion import DetectionSet, decode_outputs
from .geometry import rotated_iou  # noqa: F401  (re-exported for callers)
from .metrics import average_precision
from .model import AgentModel, Variant
from .training import AdapterBaseline, FrozenFeatures
from .workspace import FULL, Workspace


@dataclass
class EvalReport:
    name: str
    ap: dict[float, float]
    meta: dict = field(default_factory=dict)
    comm_bytes: int = 0
    cost: dict | None = None

    def __post_init__(self):
        for v in self.ap.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"AP {v} outside [0, 1]")

    def ap_at(self, thresh: float) -> float:
        return self.ap[thresh]

    def to_record(self) -> dict:
        rec = {"name": self.name, **{f"ap{int(round(t * 100))}": round(v, 6) for t, v in sorted(self.ap.items())},
               "meta": self.meta, "comm_bytes": self.comm_bytes}
        if self.cost is not None:
            rec["cost"] = self.cost
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        ap = {int(k[2:]) / 100: v for k, v in rec.items() if k.startswith("ap")}
        return cls(rec["name"], ap, rec.get("meta", {}), rec.get("comm_bytes", 0), rec.get("cost"))


def write_reports(path, reports: list[EvalReport]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in reports))


def read_reports(path) -> list[EvalReport]:
    return [EvalReport.from_record(json.loads(line)) for line in Path(path).read_text().splitlines() if line]


def write_detections(path, scene_ids, dets: list[DetectionSet]):
    lines = []
    for sid, d in zip(scene_ids, dets):
        for b, s in zip(d.boxes, d.scores):
            rec = {"scene_id": int(sid), "cx": float(b[0]), "cy": float(b[1]), "w": float(b[2]),
                   "l": float(b[3]), "yaw": float(b[4]), "score": float(s)}
            lines.append(json.dumps(rec, sort_keys=True))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines))


def ap_table(dets, gts, thresholds) -> dict[float, float]:
    return {t: average_precision(dets, gts, t) for t in thresholds}


# graph evaluation -----------------------------------------------------------


class Evaluator:
    """Shared state for evaluating graphs on one split of a workspace."""

    def __init__(self, ws: Workspace, split: str = "test"):
        self.ws = ws
        self.cfg = ws.cfg
        self.cache = ws.cache(split)
        self.frame = self.cfg.world.eval_frame
        self.indices = list(range(len(self.cache)))
        roster = [(a.spec(), a.slot) for a in self.cfg.agents]
        self.gts = [self.cache.label_boxes(i, roster, self.frame) for i in self.indices]

    def graph(self, ego: AgentModel, collaborators: list[tuple[AgentModel, object]]) -> CollaborationGraph:
        reg = ExtractorRegistry()
        g = CollaborationGraph(ego.spec.agent_id, reg, self.cfg.eval.max_range_m)
        g.add_agent(ego, self.ws.slot(ego.spec.agent_id))
        for model, ext in collaborators:
            aid = model.spec.agent_id
            g.add_agent(model, self.ws.slot(aid))
            if ext is not None:
                reg.register(aid, ego.spec.agent_id, ext, ego.feature_hw)
        return g

    def run(self, name: str, graph: CollaborationGraph, noise: NoiseSpec | None = None, meta=None,
            detections_path=None) -> EvalReport:
        ev = self.cfg.eval
        out = run_episodes(graph, self.cache, self.indices, noise, self.frame, self.cfg.seed,
                           ev.score_thresh, ev.nms_iou)
        if detections_path is not None:
            write_detections(detections_path, [self.cache.scenes[i].scene_id for i in self.indices], out.detections)
        return EvalReport(name, ap_table(out.detections, self.gts, ev.iou_thresholds), dict(meta or {}),
                          out.ledger.total_bytes)

    def run_adapter(self, name: str, ego: AgentModel, collab: AgentModel, base: AdapterBaseline,
                    meta=None) -> EvalReport:
        ev = self.cfg.eval
        with torch.no_grad():
            f_ego = ego.encode(self.cache.obs(ego.spec, self.ws.slot(ego.spec.agent_id), self.frame))
            f_col = collab.encode(self.cache.obs(collab.spec, self.ws.slot(collab.spec.agent_id), self.frame))
            cls, reg = base(f_ego, f_col, ego.feature_hw)
        dets = [decode_outputs(cls[b].numpy(), reg[b].numpy(), ego.anchors.boxes, ev.score_thresh, ev.nms_iou)
                for b in range(len(self.indices))]
        C, H, W = f_col.shape[1:]
        return EvalReport(name, ap_table(dets, self.gts, ev.iou_thresholds), dict(meta or {}),
                          len(self.indices) * (HEADER.size + C * H * W * 4))


# ablation and baseline ------------------------------------------------------


def ablation_variant(row) -> Variant:
    return Variant(use_dme=row.dme, use_ce=row.ce)


def ablation_label(row) -> str:
    mark = lambda b: "x" if b else "-"
    return f"DME={mark(row.dme)} CE={mark(row.ce)} Align={mark(row.align)}"


def run_ablation(ws: Workspace, evaluator: Evaluator | None = None) -> list[EvalReport]:
    """One report per (DME, CE, Align) row on the ego + ablation-collaborator pair."""
    ev = evaluator or Evaluator(ws)
    ego_id, col_id = ws.cfg.ego_id, ws.cfg.ablation.collaborator
    reports = []
    for row in ws.cfg.ablation.rows:
        v = ablation_variant(row)
        ego, col = ws.model(ego_id, v), ws.model(col_id, v)
        ext = ws.pair(col_id, ego_id, v) if row.align else col.extractor
        meta = {"dme": row.dme, "ce": row.ce, "align": row.align, "label": ablation_label(row)}
        reports.append(ev.run(f"ablation[{ablation_label(row)}]", ev.graph(ego, [(col, ext)]), meta=meta))
    return reports


def gencomm_partition(pair_extractor) -> ParameterPartition:
    return ParameterPartition(trainable={"pair_extractor": pair_extractor})


def adapter_partition(base: AdapterBaseline) -> ParameterPartition:
    return ParameterPartition(trainable=base.trained_modules())


def stage2_costs(ego: AgentModel, collab: AgentModel, pair_extractor, base: AdapterBaseline) -> dict[str, CostReport]:
    """Trained parameters and forward FLOPs of one new pair, for a single probe sample."""
    obs = torch.zeros((1, collab.spec.in_channels, *collab.spec.obs_hw))
    f_col = collab.encode(obs).detach()
    f_ego = torch.zeros((1, ego.spec.feature_channels, *ego.feature_hw))
    gencomm = count_cost(gencomm_partition(pair_extractor), lambda: pair_extractor(f_col, ego.feature_hw))
    adapter = count_cost(adapter_partition(base), lambda: base(f_ego, f_col, ego.feature_hw))
    encoder = count_cost(ParameterPartition(trainable={"encoder": collab.encoder}), lambda: collab.encode(obs))
    return {"gencomm": gencomm, "adapter": adapter, "collab_encoder": encoder}


def compare_baseline(ws: Workspace, base: AdapterBaseline, evaluator: Evaluator | None = None) -> list[EvalReport]:
    """Solo, GenComm and adapter on the ego + ablation-collaborator pair, with stage-2 costs."""
    ev = evaluator or Evaluator(ws)
    ego_id, col_id = ws.cfg.ego_id, ws.cfg.ablation.collaborator
    ego, col = ws.model(ego_id), ws.model(col_id)
    pair = ws.pair(col_id, ego_id)
    costs = stage2_costs(ego, col, pair, base)
    solo = ev.run("solo", ev.graph(ego, []), meta={"agents": [ego_id]})
    gen = ev.run("gencomm", ev.graph(ego, [(col, pair)]), meta={"agents": [ego_id, col_id]})
    gen.cost = costs["gencomm"].to_dict()
    ada = ev.run_adapter("adapter", ego, col, base, meta={"agents": [ego_id, col_id]})
    ada.cost = costs["adapter"].to_dict()
    return [solo, gen, ada]


def scalability_costs(ws: Workspace, bases: dict[int, AdapterBaseline], pairs: dict[int, object]) -> list[dict]:
    """Cumulative new-agent cost as collaborators join in configured order."""
    ego = ws.model(ws.cfg.ego_id)
    rows, cum_g, cum_a = [], CostReport(0, 0), CostReport(0, 0)
    rows.append({"agents": 1, "gencomm_params": 0, "gencomm_flops": 0, "adapter_params": 0, "adapter_flops": 0})
    for n, aid in enumerate([a for a in ws.cfg.order if a != ws.cfg.ego_id], start=2):
        c = stage2_costs(ego, ws.model(aid), pairs[aid], bases[aid])
        cum_g = CostReport(cum_g.params + c["gencomm"].params, cum_g.flops + c["gencomm"].flops)
        cum_a = CostReport(cum_a.params + c["adapter"].params, cum_a.flops + c["adapter"].flops)
        rows.append({"agents": n, "joined": aid, "gencomm_params": cum_g.params, "gencomm_flops": cum_g.flops,
                     "adapter_params": cum_a.params, "adapter_flops": cum_a.flops})
    return rows


def cprime_accounting(channels: list[int], hw) -> list[dict]:
    H, W = hw
    return [{"channels": c, "payload_bytes": c * H * W * 4, "wire_bytes": HEADER.size + c * H * W * 4,
             "log2_volume": comm_volume_log2(c, H, W, 4)} for c in channels]


def generator_step_time(model: AgentModel, channels: int, repeats: int = 5) -> float:
    """Wall-clock seconds per full generation with an untrained denoiser taking C' message channels."""
    from .diffusion import FeatureGenerator

    torch.manual_seed(0)
    gen = FeatureGenerator(model.spec.feature_channels, channels, model.schedule, model.hyper.denoiser_base)
    f = torch.zeros((1, model.spec.feature_channels, *model.feature_hw))
    m = torch.zeros((1, channels, *model.feature_hw))
    owner = torch.zeros(1, dtype=torch.long)
    with torch.no_grad():
        gen(f, m, owner, f)
        t0 = time.perf_counter()
        for _ in range(repeats):
            gen(f, m, owner, f)
    return (time.perf_counter() - t0) / repeats


# text tables and plots ------------------------------------------------------


def format_table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(h) for h in headers]] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_table(reports: list[EvalReport], thresholds=(0.3, 0.5, 0.7)) -> str:
    headers = ["name"] + [f"AP{int(round(t * 100))}" for t in thresholds] + ["bytes"]
    rows = [[r.name] + [r.ap[t] for t in thresholds] + [r.comm_bytes] for r in reports]
    return format_table(headers, rows)


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_png(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80, metadata={"Software": None})


def plot_robustness(sweeps: dict[str, list[EvalReport]], solo: EvalReport, path, thresh: float = 0.5):
    plt = _figure()
    fig, axes = plt.subplots(1, len(sweeps), figsize=(4 * len(sweeps), 3.2))
    axes = np.atleast_1d(axes)
    for ax, (kind, reps) in zip(axes, sweeps.items()):
        xs = [r.meta["level"] for r in reps]
        ax.plot(xs, [r.ap[thresh] for r in reps], "o-", label="collaborative")
        ax.axhline(solo.ap[thresh], color="gray", ls="--", label="solo")
        ax.set_xlabel(kind)
        ax.set_ylabel(f"AP@{thresh}")
        ax.legend(fontsize=7)
    fig.tight_layout()
    save_png(fig, path)
    plt.close(fig)


def plot_ablation(reports: list[EvalReport], path, thresh: float = 0.5):
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    labels = [r.meta.get("label", r.name) for r in reports]
    ax.barh(range(len(reports)), [r.ap[thresh] for r in reports])
    ax.set_yticks(range(len(reports)), labels, fontsize=7)
    ax.set_xlabel(f"AP@{thresh}")
    fig.tight_layout()
    save_png(fig, path)
    plt.close(fig)


def plot_scalability(cost_rows: list[dict], join_reports: list[EvalReport], path, thresh: float = 0.5):
    plt = _figure()
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    n = [r["agents"] for r in cost_rows]
    a.plot(n, [r["gencomm_params"] for r in cost_rows], "o-", label="GenComm")
    a.plot(n, [r["adapter_params"] for r in cost_rows], "s-", label="adapter")
    a.set_xlabel("agents")
    a.set_ylabel("trained parameters")
    a.legend(fontsize=7)
    b.plot([r.meta["agents"] for r in join_reports], [r.ap[thresh] for r in join_reports], "o-")
    b.set_xlabel("agents")
    b.set_ylabel(f"AP@{thresh}")
    fig.tight_layout()
    save_png(fig, path)
    plt.close(fig)
