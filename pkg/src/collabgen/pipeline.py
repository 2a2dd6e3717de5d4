"""Pipeline commands over a workspace: data, both training stages, evaluation,
robustness sweeps, cost reports, plots and the manifest."""

from __future__ import annotations

import json
import logging
import platform
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import file_sha256, load_checkpoint, module_arrays, save_checkpoint, array_checksums
from .comm import NoiseSpec, comm_volume_log2
from .config import ExperimentConfig, dump_config
from .errors import FrozenParameterError, MissingArtifactError
from .evalkit import (EvalReport, Evaluator, ablation_variant, cprime_accounting, compare_baseline,
                      format_table, generator_step_time, plot_ablation, plot_robustness, plot_scalability,
                      read_reports, report_table, run_ablation, scalability_costs, stage2_costs, write_reports)
from .model import Variant
from .scene import generate_dataset, write_dataset
from .training import AdapterBaseline, align_stage2, train_adapter, train_stage1
from .workspace import FULL, Workspace, load_pair, load_stage1, save_pair, save_stage1

log = logging.getLogger(__name__)

VOLATILE = {"reports/cprime_timing.jsonl", "reports/timings.json"}


def set_deterministic(flag: bool = True):
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(flag)


# data and training ----------------------------------------------------------


def gen_data(ws: Workspace) -> Path:
    w = ws.cfg.world
    frames = {"test": w.test_frames}
    ds = generate_dataset(w.scene_config(), ws.cfg.seed, dict(w.splits), frames)
    return write_dataset(ds, ws.data_dir)


def needed_variants(cfg: ExperimentConfig) -> dict[int, set[Variant]]:
    """Stage-1 variants per agent: the full model everywhere plus the ablation grid."""
    out = {a.agent_id: {FULL} for a in cfg.agents}
    if len(cfg.agents) > 1:
        for row in cfg.ablation.rows:
            v = ablation_variant(row)
            out[cfg.ego_id].add(v)
            out[cfg.ablation.collaborator].add(v)
    return out


def stage1(ws: Workspace, agent_id: int, variant: Variant = FULL, out=None) -> Path:
    cfg = ws.cfg
    out = Path(out) if out else ws.stage1_path(agent_id, variant)
    spec = cfg.agent(agent_id).spec()
    train = ws.cache("train")
    tcfg = cfg.stage1.train_config(cfg.seed, cfg.loss, len(cfg.world.slot_zones))
    log_name = f"stage1_{agent_id}{'' if variant == FULL else '__' + variant.tag}"
    model, _ = train_stage1(spec, train, tcfg, cfg.loss.weights(), cfg.model.hyper(), variant,
                            cfg.diffusion.schedule(), ws.log_path(log_name))
    save_stage1(out, model, {"config_hash": ws.config_hash})
    return out


def stage2(ws: Workspace, ego_ckpt, collab_ckpt, out) -> Path:
    """Align a pair extractor from the collaborator's checkpoint to the ego's."""
    cfg = ws.cfg
    ego_ckpt, collab_ckpt, out = Path(ego_ckpt), Path(collab_ckpt), Path(out)
    for p in (ego_ckpt, collab_ckpt):
        if not p.exists():
            raise MissingArtifactError(p, "train-stage1")
    ego, collab = load_stage1(ego_ckpt), load_stage1(collab_ckpt)
    ego_arrays_before = array_checksums(load_checkpoint(ego_ckpt)[0])
    tcfg = cfg.stage2.train_config(cfg.seed, cfg.loss, len(cfg.world.slot_zones))
    name = f"stage2_{collab.spec.agent_id}_to_{ego.spec.agent_id}"
    if ego.variant != FULL:
        name += "__" + ego.variant.tag
    ext, _, frozen = align_stage2(ego, collab, ws.cache("train"), tcfg, cfg.loss.weights(), ws.log_path(name))
    # the frozen ego stack, re-serialised after training, must hash identically
    if array_checksums(module_arrays(ego, "model.")) != ego_arrays_before:
        raise FrozenParameterError("ego checkpoint arrays changed during alignment")
    meta = {
        "sender": collab.spec.agent_id, "receiver": ego.spec.agent_id,
        "in_channels": collab.spec.feature_channels, "use_dme": collab.variant.use_dme,
        "hyper": json.loads(json.dumps(collab.hyper.__dict__)), "target_hw": list(ego.feature_hw),
        "ego_ckpt_sha256": file_sha256(ego_ckpt), "collab_ckpt_sha256": file_sha256(collab_ckpt),
        "ego_array_sha256": ego_arrays_before, "frozen_sha256": frozen, "epochs": tcfg.epochs,
    }
    save_pair(out, ext, meta)
    return out


def train_adapter_pair(ws: Workspace, collab_id: int) -> tuple[AdapterBaseline, Path]:
    cfg = ws.cfg
    ego, col = load_stage1(ws.stage1_path(cfg.ego_id)), load_stage1(ws.stage1_path(collab_id))
    tcfg = cfg.adapter.train_config(cfg.seed, cfg.loss, len(cfg.world.slot_zones))
    base, _ = train_adapter(ego, col, ws.cache("train"), tcfg, cfg.loss.weights(),
                            ws.log_path(f"adapter_{collab_id}_to_{cfg.ego_id}"))
    path = ws.adapter_path(collab_id, cfg.ego_id)
    save_checkpoint(path, module_arrays(base, "adapter."), {"kind": "adapter", "sender": collab_id,
                                                             "receiver": cfg.ego_id})
    return base, path


def load_adapter(ws: Workspace, collab_id: int) -> AdapterBaseline:
    from .checkpoint import load_module_arrays

    path = ws.adapter_path(collab_id, ws.cfg.ego_id)
    arrays, _ = load_checkpoint(path, "repro-all")
    base = AdapterBaseline(ws.model(ws.cfg.ego_id), ws.model(collab_id).spec)
    load_module_arrays(base, arrays, "adapter.")
    base.eval()
    return base


def untrained_adapter(ws: Workspace, collab_id: int) -> AdapterBaseline:
    torch.manual_seed(0)
    return AdapterBaseline(ws.model(ws.cfg.ego_id), ws.model(collab_id).spec)


# evaluation -----------------------------------------------------------------


def eval_main(ws: Workspace, ev: Evaluator | None = None) -> list[EvalReport]:
    """Solo, each aligned pair, each unaligned pair and the dynamic join/leave curve."""
    cfg = ws.cfg
    ev = ev or Evaluator(ws)
    ego = ws.model(cfg.ego_id)
    reports = [ev.run("solo", ev.graph(ego, []), meta={"agents": 1, "members": [cfg.ego_id]},
                      detections_path=ws.report_path("detections_solo.jsonl"))]
    for aid in [a for a in cfg.order if a != cfg.ego_id]:
        col = ws.model(aid)
        reports.append(ev.run(f"pair[{aid}->{cfg.ego_id}]", ev.graph(ego, [(col, ws.pair(aid, cfg.ego_id))]),
                              meta={"agents": 2, "members": [cfg.ego_id, aid], "aligned": True},
                              detections_path=ws.report_path(f"detections_pair_{aid}.jsonl")))
        reports.append(ev.run(f"pair_unaligned[{aid}->{cfg.ego_id}]", ev.graph(ego, [(col, col.extractor)]),
                              meta={"agents": 2, "members": [cfg.ego_id, aid], "aligned": False}))
    return reports


def eval_join(ws: Workspace, ev: Evaluator | None = None) -> list[EvalReport]:
    cfg = ws.cfg
    ev = ev or Evaluator(ws)
    ego = ws.model(cfg.ego_id)
    order = [a for a in cfg.order if a != cfg.ego_id]
    reports = []
    for n in range(len(order) + 1):
        members = order[:n]
        g = ev.graph(ego, [(ws.model(a), ws.pair(a, cfg.ego_id)) for a in members])
        reports.append(ev.run(f"join[{n + 1}]", g, meta={"agents": n + 1, "members": [cfg.ego_id] + members,
                                                          "kind": "join"}))
    for a in order:
        rest = [b for b in order if b != a]
        g = ev.graph(ego, [(ws.model(b), ws.pair(b, cfg.ego_id)) for b in rest])
        reports.append(ev.run(f"leave[{a}]", g, meta={"agents": len(order), "removed": a, "kind": "leave",
                                                       "members": [cfg.ego_id] + rest}))
    return reports


def robustness(ws: Workspace, sweep: str, levels=None, ev: Evaluator | None = None) -> list[EvalReport]:
    """AP of the ego + ablation-collaborator pair as one noise source sweeps."""
    cfg = ws.cfg
    ev = ev or Evaluator(ws)
    if sweep not in ("pose", "delay", "degrade"):
        raise ValueError("sweep must be pose, delay or degrade")
    levels = list(levels if levels is not None else getattr(cfg.noise, sweep))
    col_id = cfg.ablation.collaborator
    g = ev.graph(ws.model(cfg.ego_id), [(ws.model(col_id), ws.pair(col_id, cfg.ego_id))])
    out = []
    for lv in levels:
        if sweep == "pose":
            noise = NoiseSpec(sigma_xy=float(lv), sigma_yaw=float(lv))
        elif sweep == "delay":
            noise = NoiseSpec(delay_frames=int(lv))
        else:
            noise = NoiseSpec(degradation=float(lv))
        out.append(ev.run(f"{sweep}[{lv}]", g, noise, meta={"sweep": sweep, "level": lv}))
    return out


def cost_report(ws: Workspace, bases: dict[int, AdapterBaseline] | None = None) -> dict:
    cfg = ws.cfg
    ego = ws.model(cfg.ego_id)
    collabs = [a for a in cfg.order if a != cfg.ego_id]
    bases = bases or {a: untrained_adapter(ws, a) for a in collabs}
    pairs = {a: ws.pair(a, cfg.ego_id) for a in collabs}
    per_pair = {}
    for a in collabs:
        c = stage2_costs(ego, ws.model(a), pairs[a], bases[a])
        per_pair[str(a)] = {k: v.to_dict() for k, v in c.items()}
    hw = ego.feature_hw
    return {
        "per_pair": per_pair,
        "scalability": scalability_costs(ws, bases, pairs),
        "comm_volume": {
            "reference_scale": {"message": comm_volume_log2(2, 64, 128, 4), "feature": comm_volume_log2(128, 64, 128, 4)},
            "toy": {"message": comm_volume_log2(cfg.model.message_channels, *hw, 4),
                    "feature": comm_volume_log2(ego.spec.feature_channels, *hw, 4)},
        },
        "cprime_sweep": cprime_accounting(list(cfg.eval.cprime_sweep), hw),
    }


def cprime_timing(ws: Workspace) -> list[dict]:
    ego = ws.model(ws.cfg.ego_id)
    return [{"channels": c, "generator_seconds": generator_step_time(ego, c, ws.cfg.eval.timing_repeats)}
            for c in ws.cfg.eval.cprime_sweep]


def write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# plots ----------------------------------------------------------------------


def make_plots(ws: Workspace, kinds=("scal", "robust", "ablation")):
    rp = ws.report_path
    th = 0.5
    outputs = []
    if "robust" in kinds:
        sweeps = {k: read_reports(rp(f"robustness_{k}.jsonl")) for k in ("pose", "delay", "degrade")
                  if rp(f"robustness_{k}.jsonl").exists()}
        if not sweeps:
            raise MissingArtifactError(rp("robustness_pose.jsonl"), "robustness")
        solo = [r for r in read_reports(_need(rp("eval_main.jsonl"), "eval")) if r.name == "solo"][0]
        plot_robustness(sweeps, solo, ws.root / "plots" / "robustness.png", th)
        lines = []
        for k, reps in sweeps.items():
            lines.append(f"[{k}]\n" + report_table(reps))
        (ws.root / "tables").mkdir(parents=True, exist_ok=True)
        (ws.root / "tables" / "robustness.txt").write_text("\n".join(lines))
        outputs.append("robustness")
    if "ablation" in kinds:
        reps = read_reports(_need(rp("ablation.jsonl"), "eval"))
        plot_ablation(reps, ws.root / "plots" / "ablation.png", th)
        rows = [[r.meta["label"], r.ap[0.5], r.ap[0.7]] for r in reps]
        (ws.root / "tables").mkdir(parents=True, exist_ok=True)
        (ws.root / "tables" / "ablation.txt").write_text(format_table(["row", "AP50", "AP70"], rows))
        outputs.append("ablation")
    if "scal" in kinds:
        cost = json.loads(_need(rp("cost.json"), "cost-report").read_text())
        join = [r for r in read_reports(_need(rp("join.jsonl"), "eval")) if r.meta.get("kind") == "join"]
        plot_scalability(cost["scalability"], join, ws.root / "plots" / "scalability.png", th)
        rows = [[r["agents"], r["gencomm_params"], r["adapter_params"], r["gencomm_flops"], r["adapter_flops"]]
                for r in cost["scalability"]]
        (ws.root / "tables").mkdir(parents=True, exist_ok=True)
        (ws.root / "tables" / "scalability.txt").write_text(
            format_table(["agents", "gencomm_params", "adapter_params", "gencomm_flops", "adapter_flops"], rows)
            + "\n" + report_table(join))
        outputs.append("scal")
    return outputs


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return path


# manifest -------------------------------------------------------------------


def write_manifest(ws: Workspace) -> Path:
    files = []
    for p in sorted(ws.root.rglob("*")):
        if not p.is_file() or p.name == "manifest.json" and p.parent == ws.root:
            continue
        rel = p.relative_to(ws.root).as_posix()
        entry = {"path": rel, "bytes": p.stat().st_size}
        if rel in VOLATILE:
            entry["volatile"] = True
            entry.pop("bytes")
        else:
            entry["sha256"] = file_sha256(p)
        files.append(entry)
    manifest = {
        "config_hash": ws.config_hash,
        "seed": ws.cfg.seed,
        "versions": {"collabgen": __version__, "python": platform.python_version(), "torch": torch.__version__,
                     "numpy": np.__version__},
        "files": files,
    }
    path = ws.root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# orchestration --------------------------------------------------------------


class PhaseTimer:
    """Wall-clock seconds per named pipeline phase."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str):
        log.info("%s", name)
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0


def repro_all(ws: Workspace) -> Path:
    cfg = ws.cfg
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.yaml").write_text(dump_config(cfg))
    phase = PhaseTimer()
    with phase("gen-data"):
        gen_data(ws)
    for aid, variants in needed_variants(cfg).items():
        for v in sorted(variants, key=lambda v: v.tag):
            with phase(f"train-stage1[{aid},{v.tag}]"):
                stage1(ws, aid, v)
    for aid in [a for a in cfg.order if a != cfg.ego_id]:
        with phase(f"align-stage2[{aid}->{cfg.ego_id},{FULL.tag}]"):
            stage2(ws, ws.stage1_path(cfg.ego_id), ws.stage1_path(aid), ws.pair_path(aid, cfg.ego_id))
    col = cfg.ablation.collaborator
    if len(cfg.agents) > 1:
        for row in cfg.ablation.rows:
            v = ablation_variant(row)
            if row.align and v != FULL and not ws.pair_path(col, cfg.ego_id, v).exists():
                with phase(f"align-stage2[{col}->{cfg.ego_id},{v.tag}]"):
                    stage2(ws, ws.stage1_path(cfg.ego_id, v), ws.stage1_path(col, v),
                           ws.pair_path(col, cfg.ego_id, v))
    ws.drop_models()
    ev = Evaluator(ws)
    with phase("eval-main"):
        write_reports(ws.report_path("eval_main.jsonl"), eval_main(ws, ev))
    if len(cfg.agents) > 1:
        with phase("eval-join"):
            write_reports(ws.report_path("join.jsonl"), eval_join(ws, ev))
        for sweep in ("pose", "delay", "degrade"):
            with phase(f"robustness[{sweep}]"):
                write_reports(ws.report_path(f"robustness_{sweep}.jsonl"), robustness(ws, sweep, ev=ev))
        with phase("ablation"):
            write_reports(ws.report_path("ablation.jsonl"), run_ablation(ws, ev))
        with phase("adapter-train"):
            train_adapter_pair(ws, col)
        ws.drop_models()
        with phase("baseline"):
            base = load_adapter(ws, col)
            write_reports(ws.report_path("baseline.jsonl"), compare_baseline(ws, base, ev))
        with phase("cost-report"):
            bases = {a: untrained_adapter(ws, a) for a in cfg.order if a != cfg.ego_id}
            bases[col] = base
            ws.report_path("cost.json").write_text(json.dumps(cost_report(ws, bases), indent=1, sort_keys=True)
                                                   + "\n")
            write_jsonl(ws.report_path("cprime_timing.jsonl"), cprime_timing(ws))
        with phase("plots"):
            make_plots(ws)
    ws.report_path("timings.json").parent.mkdir(parents=True, exist_ok=True)
    ws.report_path("timings.json").write_text(json.dumps(phase.seconds, indent=1, sort_keys=True) + "\n")
    return write_manifest(ws)
