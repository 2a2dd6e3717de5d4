"""Acceptance criteria, one test each, at their pinned tolerances.

Criteria 5-10 and 12 read the artifacts of two ``repro-all --deterministic``
runs of the shipped toy config. The runs are made fresh into a temporary
directory unless COLLABGEN_ACCEPTANCE_DIR names a directory to run in (runs
already complete there, i.e. with a manifest, are reused).
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from collabgen.checkpoint import array_checksums, file_sha256, load_checkpoint
from collabgen.comm import comm_volume_log2
from collabgen.config import default_config_path, load_config
from collabgen.diffusion import ConditionalUNet, DiffusionSchedule, forward_diffuse
from collabgen.dme import DeformableMessageExtractor, OffsetField, deformable_extract
from collabgen.enhancer import ChannelEnhancer
from collabgen.evalkit import ablation_label, read_reports
from collabgen.fusion import AttentionFusion, DetectionHead
from collabgen.metrics import average_precision
from collabgen.training import param_checksums
from collabgen.workspace import load_pair, load_stage1

from gradcheck_util import assert_param_grads
from test_dme import feat
from test_geometry_metrics import dets, mc_iou, random_pair

RESULTS: dict[int, str] = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


# fast, self-contained criteria ----------------------------------------------


def test_c01_comm_volume():
    t0 = time.perf_counter()
    msg, full = comm_volume_log2(2, 64, 128, 4), comm_volume_log2(128, 64, 128, 4)
    ratio = 2 ** (full - msg)
    dt = time.perf_counter() - t0
    record(1, msg == 16.0 and full == 22.0 and ratio == 64.0 and dt < 1,
           f"message {msg} feature {full} ratio {ratio} in {dt:.3f}s")


def test_c02_zero_offset_deformable_is_conv():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    worst = 0.0
    for i in range(100):
        f = feat(6, 9, 11, seed=i)
        ext = DeformableMessageExtractor(6, 2, 3)
        out = deformable_extract(f, OffsetField(torch.zeros(1, 18, 9, 11), 3), ext)
        k = ext.kernel
        ref = F.conv2d(f.data[None], k.weight * k.modulation.view(1, 1, 3, 3), k.bias, padding=1)[0]
        worst = max(worst, (out - ref).abs().max().item())
    dt = time.perf_counter() - t0
    record(2, worst < 1e-6 and dt < 10, f"max abs diff {worst:.2e} over 100 features in {dt:.2f}s")


def test_c03_diffusion_moment_law():
    t0 = time.perf_counter()
    s = DiffusionSchedule()
    f_init = torch.tensor([-1.5, 0.0, 0.7, 2.0], dtype=torch.float64)
    f = f_init.expand(100_000, 4).clone()
    errs = []
    for t in range(1, s.T + 1):
        out = forward_diffuse(f, t, s, rng_seed=30 + t)
        a = s.alpha_bar(t)
        errs.append((out.mean(0) - math.sqrt(a) * f_init).abs().max().item())
        errs.append((out.var(0) - (1 - a)).abs().max().item())
    dt = time.perf_counter() - t0
    record(3, max(errs) <= 0.01 and dt < 30, f"worst moment error {max(errs):.4f} over T={s.T} steps in {dt:.2f}s")


def _grad_targets():
    torch.manual_seed(0)
    d = torch.float64
    ext = DeformableMessageExtractor(4, 2, 3).double()
    with torch.no_grad():
        ext.offset_net.weight.normal_(0, 0.1)
        ext.offset_net.bias.normal_(0, 0.3)
    x = torch.randn(1, 4, 6, 7, dtype=d)
    tgt = torch.randn(1, 2, 9, 11, dtype=d)
    ext_loss = lambda: ((ext(x, (9, 11)) - tgt) ** 2).mean()
    unet = ConditionalUNet(3, 2, base=4).double()
    fu, mu, tu = (torch.randn(1, c, 4, 4, dtype=d) for c in (3, 2, 3))
    enh = ChannelEnhancer(6).double()
    xe, te = torch.randn(2, 6, 4, 4, dtype=d), torch.randn(2, 6, 4, 4, dtype=d)
    fusion = AttentionFusion(4).double()
    head = DetectionHead(4, 2, 2).double()
    ego, other = torch.randn(1, 4, 3, 3, dtype=d), torch.randn(1, 4, 3, 3, dtype=d)
    th = torch.randn(1, 18, 5, dtype=d)
    return {
        "offset net": (ext, ext_loss, ext.offset_net),
        "deformable kernel": (ext, ext_loss, ext.kernel),
        "resizer": (ext, ext_loss, ext.resizer),
        "denoiser": (unet, lambda: ((unet(fu, mu, 2) - tu) ** 2).mean(), unet),
        "channel enhancer": (enh, lambda: ((enh(xe) - te) ** 2).sum(), enh),
        "fusion": (fusion, lambda: (fusion(ego, [other]) ** 2).sum(), fusion),
        "detection heads": (head, lambda: head(ego)[0].sigmoid().sum() + ((head(ego)[1] - th) ** 2).sum(), head),
    }


def test_c04_gradient_suite():
    t0 = time.perf_counter()
    checked, failed = {}, []
    for name, (module, loss, part) in _grad_targets().items():
        try:
            checked[name] = assert_param_grads(module, loss, n=10, rtol=1e-4, params=list(part.parameters()))
        except AssertionError as e:
            failed.append(f"{name}: {e}")
    dt = time.perf_counter() - t0
    ok = not failed and all(v >= 10 for v in checked.values()) and len(checked) == 7 and dt < 300
    record(4, ok, f"{len(checked)}/7 modules x >=10 params at rtol 1e-4 in {dt:.1f}s {failed or ''}")


def test_c11_metric_oracles():
    t0 = time.perf_counter()
    gts = np.array([[0, 0, 2, 4, 0], [20, 0, 2, 4, 0]], dtype=float)
    preds = np.array([[0, 0, 2, 4, 0], [40, 0, 2, 4, 0], [20, 0, 2, 4, 0]], dtype=float)
    ap = average_precision([dets(preds, [0.9, 0.8, 0.7])], [gts], 0.5)
    from collabgen.geometry import rotated_iou

    g = np.random.default_rng(7)
    worst = 0.0
    for k in range(100):
        a, b = random_pair(g)
        worst = max(worst, abs(rotated_iou(a, b) - mc_iou(a, b, seed=k)))
    dt = time.perf_counter() - t0
    record(11, ap == 1.0 * 0.5 + (2 / 3) * 0.5 and worst < 0.005 and dt < 60,
           f"AP {ap:.6f} (oracle 0.833333); worst IoU gap {worst:.4f} over 100 pairs in {dt:.1f}s")


# pipeline criteria ----------------------------------------------------------


def _repro(root: Path) -> Path:
    if (root / "manifest.json").exists():
        return root
    root.parent.mkdir(parents=True, exist_ok=True)
    with open(root.parent / f"{root.name}.log", "w") as log:
        subprocess.run([sys.executable, "-m", "collabgen.cli", "repro-all", "--deterministic", "-v",
                        "--config", str(default_config_path()), "--output-dir", str(root)],
                       check=True, stdout=log, stderr=subprocess.STDOUT)
    return root


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    base = os.environ.get("COLLABGEN_ACCEPTANCE_DIR")
    base = Path(base) if base else tmp_path_factory.mktemp("acceptance")
    return _repro(base / "run1"), _repro(base / "run2")


@pytest.fixture(scope="session")
def ws(runs):
    root = runs[0]
    cfg = load_config(root / "config.yaml", apply_env=False)
    timings = json.loads((root / "reports" / "timings.json").read_text())
    return root, cfg, timings


def _ap50(path, name=None):
    reps = read_reports(path)
    table = {r.name: r.ap[0.5] for r in reps}
    return table if name is None else table[name]


def test_c05_freezing_contract(ws):
    root, cfg, _ = ws
    pairs = sorted((root / "ckpt" / "pair").glob("*.ckpt"))
    bad = []
    for p in pairs:
        _, meta = load_pair(p)
        suffix = p.stem.split("__")[1] if "__" in p.stem else None
        stem = lambda a: f"{a}_{cfg.agent(a).name}" + (f"__{suffix}" if suffix else "")
        ego_ck = root / "ckpt" / "stage1" / f"{stem(meta['receiver'])}.ckpt"
        col_ck = root / "ckpt" / "stage1" / f"{stem(meta['sender'])}.ckpt"
        ego, col = load_stage1(ego_ck), load_stage1(col_ck)
        now = param_checksums({"ego": ego, "collab_encoder": col.encoder})
        if now != meta["frozen_sha256"]:
            bad.append(f"{p.name}: parameter hashes")
        if file_sha256(ego_ck) != meta["ego_ckpt_sha256"] or file_sha256(col_ck) != meta["collab_ckpt_sha256"]:
            bad.append(f"{p.name}: checkpoint file hashes")
        if array_checksums(load_checkpoint(ego_ck)[0]) != meta["ego_array_sha256"]:
            bad.append(f"{p.name}: ego arrays")
    n = sum(len(load_pair(p)[1]["frozen_sha256"]) for p in pairs)
    record(5, bool(pairs) and not bad, f"{len(pairs)} pair checkpoints, {n} frozen tensors re-hashed {bad or ''}")


def test_c06_scalability_cost(ws):
    root, cfg, timings = ws
    cost = json.loads((root / "reports" / "cost.json").read_text())
    col, ego = cfg.ablation.collaborator, cfg.ego_id
    c = cost["per_pair"][str(col)]
    pr = c["gencomm"]["params"] / c["adapter"]["params"]
    fr = c["gencomm"]["flops"] / c["adapter"]["flops"]
    dt = timings[f"align-stage2[{col}->{ego},dme-ce]"] + timings["adapter-train"]
    record(6, pr < 0.2 and fr < 0.2 and dt < 1200,
           f"params {c['gencomm']['params']}/{c['adapter']['params']} = {pr:.3f}, "
           f"FLOPs {c['gencomm']['flops']}/{c['adapter']['flops']} = {fr:.3f}, both trainings {dt / 60:.1f} min")


def test_c07_collaboration_gain(ws):
    root, cfg, timings = ws
    col, ego = cfg.ablation.collaborator, cfg.ego_id
    ap = _ap50(root / "reports" / "eval_main.jsonl")
    solo, pair = ap["solo"], ap[f"pair[{col}->{ego}]"]
    dt = (timings[f"train-stage1[{ego},dme-ce]"] + timings[f"train-stage1[{col},dme-ce]"]
          + timings[f"align-stage2[{col}->{ego},dme-ce]"] + timings["eval-main"])
    n_test = cfg.world.splits["test"]
    record(7, pair - solo >= 0.05 and dt < 1800 and n_test == 200 and cfg.world.occlusion,
           f"AP50 pair {pair:.4f} vs solo {solo:.4f} (gain {pair - solo:+.4f}, need >= 0.05) "
           f"on {n_test} scenes, {dt / 60:.1f} min")


def test_c08_ablation_ordering(ws):
    root, cfg, timings = ws
    rows = {(r.meta["dme"], r.meta["ce"], r.meta["align"]): r.ap[0.5]
            for r in read_reports(root / "reports" / "ablation.jsonl")}
    full = rows[(True, True, True)]
    singles = [k for k in rows if sum(a != b for a, b in zip(k, (True, True, True))) == 1]
    problems = [f"full < {k}" for k in singles if full < rows[k]]
    for k in rows:
        if k[2] and (k[0], k[1], False) in rows and rows[k] < rows[(k[0], k[1], False)]:
            problems.append(f"align-on < align-off at dme={k[0]} ce={k[1]}")
    worst = rows[(False, False, False)]
    others = [v for k, v in rows.items() if k != (False, False, False)]
    if not all(v >= worst + 0.01 for v in others):
        problems.append(f"no-DME-no-CE margin {min(others) - worst:+.4f} < 0.01")
    dt = timings["ablation"] + sum(v for k, v in timings.items()
                                   if (k.startswith("train-stage1") or k.startswith("align-stage2"))
                                   and not k.endswith("dme-ce]"))
    table = ", ".join(f"{ablation_label(type('R', (), dict(dme=k[0], ce=k[1], align=k[2])))}: {v:.4f}"
                      for k, v in sorted(rows.items()))
    record(8, not problems and dt < 3600, f"[{table}] {problems or 'ordering holds'}, {dt / 60:.1f} min")


def test_c09_robustness_trends(ws):
    root, cfg, timings = ws
    solo = _ap50(root / "reports" / "eval_main.jsonl", "solo")
    problems, parts = [], []
    for sweep in ("pose", "delay", "degrade"):
        reps = read_reports(root / "reports" / f"robustness_{sweep}.jsonl")
        levels = [r.meta["level"] for r in reps]
        aps = [r.ap[0.5] for r in reps]
        expected = list(getattr(cfg.noise, sweep))
        if levels != expected:
            problems.append(f"{sweep} levels {levels}")
        for i in range(1, len(aps)):
            if aps[i] > aps[i - 1] + 0.01:
                problems.append(f"{sweep} rises {levels[i - 1]}->{levels[i]} by {aps[i] - aps[i - 1]:+.4f}")
        if sweep == "degrade":
            for lv, a in zip(levels, aps):
                if lv <= 0.4 and not a > solo:
                    problems.append(f"degrade {lv}: {a:.4f} <= solo {solo:.4f}")
        parts.append(f"{sweep} " + "/".join(f"{a:.3f}" for a in aps))
    dt = sum(timings[f"robustness[{s}]"] for s in ("pose", "delay", "degrade"))
    record(9, not problems and dt < 1800, f"{'; '.join(parts)}; solo {solo:.3f}; {problems or 'trends hold'}, "
                                          f"{dt / 60:.1f} min")


def test_c10_dynamic_join(ws):
    root, cfg, timings = ws
    ap = _ap50(root / "reports" / "join.jsonl")
    curve = [ap[f"join[{n}]"] for n in range(1, len(cfg.agents) + 1)]
    mono = all(b >= a for a, b in zip(curve, curve[1:]))
    inc12, inc34 = curve[1] - curve[0], curve[-1] - curve[-2]
    dt = timings["eval-join"]
    record(10, len(curve) == 4 and mono and inc34 < inc12 and dt < 1800,
           f"AP50 by size {[round(c, 4) for c in curve]}, 1->2 {inc12:+.4f} vs 3->4 {inc34:+.4f}, {dt / 60:.1f} min")


def test_c12_determinism(runs):
    a, b = (r / "manifest.json" for r in runs)
    same = a.read_bytes() == b.read_bytes()
    n = len(json.loads(a.read_text())["files"])
    record(12, same, f"manifests {'byte-identical' if same else 'differ'} over {n} files")
