"""Command-line entry point: ``carvenerf <command> [flags]``."""
from __future__ import annotations

import argparse
import datetime
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import cimle, config as cfgmod, report, scenesim
from .diffcore import ConfigurationError, DivergedError
from .metrics import summarize, write_metrics_csv
from .render import write_float_map
from .scenesim import UsageError
from .trainer import NerfTrainer, RunState, hypotheses_for, train_prior

log = logging.getLogger("carvenerf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p, *names):
    if "config" in names:
        p.add_argument("--config", help="run configuration file (defaults when omitted)")
    if "seed" in names:
        p.add_argument("--seed", type=int, help="override the relevant seed")
    if "out" in names:
        p.add_argument("--out", help="run directory (default runs/<config hash>-<timestamp>)")
    if "variant" in names:
        p.add_argument("--variant", help="loss variant")
    if "preset" in names:
        p.add_argument("--preset", help="scene preset")
    if "resume" in names:
        p.add_argument("--resume", help="checkpoint to continue from")
    if "m" in names:
        p.add_argument("--m", type=int, help="hypothesis count override")
    if "data" in names:
        p.add_argument("--data", help="dataset directory (from gen-scene); generated from config when omitted")
    if "prior" in names:
        p.add_argument("--prior", help="train-prior run directory holding hypotheses/")


def build_parser():
    p = _Parser(prog="carvenerf", description="Space-carving supervised radiance fields at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("config-init", help="write a fully defaulted config"), "out")
    _common(sub.add_parser("gen-scene", help="render a dataset"), "config", "seed", "out", "preset")
    _common(sub.add_parser("train-prior", help="train the cIMLE prior and draw hypotheses"),
            "config", "seed", "out", "data", "m")
    tn = sub.add_parser("train-nerf", help="train one radiance field")
    _common(tn, "config", "seed", "out", "variant", "resume", "m", "data", "prior")
    tn.add_argument("--until", type=int, default=None, help="stop after this step and checkpoint (for --resume)")
    ev = sub.add_parser("eval", help="evaluate a train-nerf run")
    ev.add_argument("--run", required=True, help="train-nerf run directory")
    _common(ev, "out")
    _common(sub.add_parser("ablate", help="train and evaluate every variant"), "config", "seed", "out", "m",
            "data", "prior")
    rd = sub.add_parser("render", help="render a view from a checkpoint")
    rd.add_argument("--run", required=True, help="train-nerf run directory")
    rd.add_argument("--view", type=int, default=None, help="view index (default: first test view)")
    _common(rd, "out")
    return p


# ---------------------------------------------------------------- helpers
def _resolve(args):
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.default_config()
    scene, nerf, prior = cfg.scene, cfg.nerf, cfg.prior
    if getattr(args, "preset", None):
        scene = replace(scene, preset=args.preset)
    if getattr(args, "seed", None) is not None:
        if args.command == "gen-scene":
            scene = replace(scene, seed=args.seed)
        elif args.command == "train-prior":
            prior = replace(prior, seed=args.seed)
        else:
            nerf = replace(nerf, seed=args.seed)
    try:
        if getattr(args, "variant", None):
            nerf = replace(nerf, variant=args.variant)
        if getattr(args, "m", None) is not None:
            nerf = replace(nerf, m_hypotheses=args.m)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    return replace(cfg, scene=scene, nerf=nerf, prior=prior).validate()


def _run_dir(args, cfg):
    if getattr(args, "out", None):
        path = args.out
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = os.path.join("runs", f"{cfgmod.config_hash(cfg)[:12]}-{stamp}")
    os.makedirs(path, exist_ok=True)
    cfgmod.save(cfg, os.path.join(path, "config.txt"))
    return path


def _make_dataset(scene_cfg, seed=None, n_train=None, n_test=None):
    sc = scenesim.make_scene(scene_cfg.preset, scene_cfg.seed if seed is None else seed, scene_cfg.glass_alpha)
    return scenesim.make_dataset(sc, n_train or scene_cfg.n_train_views, n_test or scene_cfg.n_test_views,
                                 scene_cfg.policy(), seed=scene_cfg.seed if seed is None else seed,
                                 width=scene_cfg.width, height=scene_cfg.height, fov_deg=scene_cfg.fov_deg,
                                 arc_deg=scene_cfg.arc_deg, jitter_deg=scene_cfg.jitter_deg)


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return scenesim.read_dataset(args.data)
    return _make_dataset(cfg.scene)


def _prior(cfg):
    """Prior trained on its own single-label dataset (same preset, prior seed)."""
    pds = _make_dataset(cfg.scene, seed=cfg.prior.seed, n_train=cfg.prior.n_views, n_test=1)
    p = cfg.prior
    return train_prior(pds, p.train_config(), seed=p.seed, hidden_widths=p.hidden_widths, latent_dim=p.latent_dim,
                       frequencies=p.frequencies, view_embedding=p.view_embedding)


def _hypotheses(cfg, ds, prior):
    return hypotheses_for(ds, prior, max(cfg.nerf.m_hypotheses, max(cfg.ablation.m_values, default=1)),
                          seed=cfg.prior.seed, frequencies=cfg.prior.frequencies,
                          view_embedding=cfg.prior.view_embedding)


def _load_hypotheses(root, ds):
    return {v.index: cimle.read_hypotheses(root, v.index, ds.height, ds.width) for v in ds.train}


def _write_hypotheses(root, ds, hyps):
    for v in ds.train:
        cimle.write_hypotheses(root, v.index, hyps[v.index], ds.height, ds.width)


def _charts(run, history, rows, label):
    h = np.asarray([r[:4] for r in history], dtype=float)
    if len(h):
        report.write(os.path.join(run, "losses.svg"),
                     report.line_chart({"photometric": (h[:, 0], h[:, 1]), "depth": (h[:, 0], h[:, 2]),
                                        "total": (h[:, 0], h[:, 3])}, f"{label} losses", "step", "loss", logy=True))


def _write_losses(path, history):
    with open(path, "w") as fh:
        fh.write("step,photometric,space_carving,total,lambda\n")
        for step, ph, sc, tot, lam in history:
            fh.write(f"{step},{ph!r},{sc!r},{tot!r},{lam!r}\n")


# ---------------------------------------------------------------- commands
def cmd_config_init(args):
    cfg = cfgmod.default_config()
    path = args.out or "carvenerf.cfg"
    if os.path.isdir(path):
        path = os.path.join(path, "carvenerf.cfg")
    cfgmod.save(cfg, path)
    print(path)


def cmd_gen_scene(args):
    cfg = _resolve(args)
    ds = _make_dataset(cfg.scene)
    run = _run_dir(args, cfg)
    scenesim.write_dataset(ds, run)
    print(run)


def cmd_train_prior(args):
    cfg = _resolve(args)
    ds = _dataset(args, cfg)
    run = _run_dir(args, cfg)
    prior = _prior(cfg)
    prior.params.save(os.path.join(run, "prior.ckpt"), {"spec": list(prior.generator.spec.hidden_widths)})
    with open(os.path.join(run, "coverage.txt"), "w") as fh:
        fh.write("# mean per-pixel coverage on the prior's own train views\nview,coverage\n")
        for k, c in prior.coverage.items():
            fh.write(f"{k},{c!r}\n")
    _write_hypotheses(os.path.join(run, "hypotheses"), ds, _hypotheses(cfg, ds, prior))
    print(run)


def _nerf_inputs(args, cfg):
    ds = _dataset(args, cfg)
    hyps = None
    if cfg.nerf.uses_depth():
        if getattr(args, "prior", None):
            hyps = _load_hypotheses(os.path.join(args.prior, "hypotheses"), ds)
        else:
            hyps = _hypotheses(cfg, ds, _prior(cfg))
    return ds, hyps


def cmd_train_nerf(args):
    cfg = _resolve(args)
    state = None
    if args.resume:
        state, _ = RunState.load(args.resume)
    ds, hyps = _nerf_inputs(args, cfg)
    run = _run_dir(args, cfg)
    if args.data:
        scenesim.write_dataset(ds, os.path.join(run, "data"))
    trainer = NerfTrainer(ds, cfg.nerf, hyps)
    trainer.run(state, until=args.until, checkpoint=os.path.join(run, "checkpoint.bin"),
                log_every=500 if args.verbose else 0)
    rows = trainer.evaluate()
    write_metrics_csv(os.path.join(run, "metrics.csv"), rows)
    _write_losses(os.path.join(run, "losses.csv"), trainer.state.history)
    _charts(run, trainer.state.history, rows, cfg.nerf.variant)
    print(run)


def _load_run(run_dir):
    cfg = cfgmod.load(os.path.join(run_dir, "config.txt"))
    state, _ = RunState.load(os.path.join(run_dir, "checkpoint.bin"))
    data = os.path.join(run_dir, "data")
    ds = scenesim.read_dataset(data) if os.path.isdir(data) else _make_dataset(cfg.scene)
    trainer = NerfTrainer(ds, replace(cfg.nerf, depth_enabled=False))
    trainer.state = state
    return cfg, ds, trainer


def cmd_eval(args):
    cfg, ds, trainer = _load_run(args.run)
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    rows = trainer.evaluate(label=cfg.nerf.variant)
    write_metrics_csv(os.path.join(out, "metrics.csv"), rows)
    view = ds.test[0]
    _, t, p = trainer.render_view(view)
    multi = np.flatnonzero(view.gt.n_modes() >= 2)
    ray = int(multi[len(multi) // 2]) if len(multi) else len(t) // 2
    gt = view.gt.packed_pmf()[ray]
    report.write(os.path.join(out, "pmf.svg"), report.pmf_overlay(t[ray], p[ray], gt[:, 0], gt[:, 1],
                                                                  f"view {view.index} ray {ray}"))
    print(out)


def cmd_render(args):
    cfg, ds, trainer = _load_run(args.run)
    out = args.out or args.run
    os.makedirs(out, exist_ok=True)
    views = {v.index: v for v in ds.views}
    idx = ds.test[0].index if args.view is None else args.view
    if idx not in views:
        raise UsageError(f"no view {idx}; available: {sorted(views)}")
    img, t, p = trainer.render_view(views[idx])
    scenesim.write_ppm(os.path.join(out, f"render_{idx}.ppm"), img)
    depth = np.sum(t * p, axis=1).reshape(ds.height, ds.width)
    write_float_map(os.path.join(out, f"depth_{idx}.f32"), depth)
    print(out)


def _ablation_job(job):
    ds, hyps, cfg, label = job
    trainer = NerfTrainer(ds, cfg, hyps)
    trainer.run()
    return trainer.evaluate(label=label), trainer.state.history


def ablation_jobs(cfg):
    base = cfg.nerf
    jobs = []
    for seed in cfg.ablation.seeds:
        for v in cfg.ablation.variants:
            jobs.append((f"{v}", replace(base, variant=v, seed=seed)))
        for m in cfg.ablation.m_values:
            if m != base.m_hypotheses or "scade" not in cfg.ablation.variants:
                jobs.append((f"scade-m{m}", replace(base, variant="scade", m_hypotheses=m, seed=seed)))
        for lam in cfg.ablation.lambdas:
            if lam != base.lam or "scade" not in cfg.ablation.variants:
                jobs.append((f"scade-lam{lam:g}", replace(base, variant="scade", lam=lam, seed=seed)))
    return jobs


def _workers():
    raw = os.environ.get("CARVENERF_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CARVENERF_THREADS must be an integer, got {raw!r}") from None
    return (os.cpu_count() or 1) if n <= 0 else n


def cmd_ablate(args):
    cfg = _resolve(args)
    ds = _dataset(args, cfg)
    run = _run_dir(args, cfg)
    if args.prior:
        hyps = _load_hypotheses(os.path.join(args.prior, "hypotheses"), ds)
    else:
        hyps = _hypotheses(cfg, ds, _prior(cfg))
    jobs = ablation_jobs(cfg)
    payload = [(ds, hyps, c, label) for label, c in jobs]
    workers = min(_workers(), len(payload))
    results = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_ablation_job, job) for job in payload]
            for (label, c), fut in zip(jobs, futures):
                results.append((label, c, _collect(fut.result, label, c)))
    else:
        for (label, c), job in zip(jobs, payload):
            results.append((label, c, _collect(lambda j=job: _ablation_job(j), label, c)))
    rows = []
    with open(os.path.join(run, "ablation.csv"), "w") as fh:
        fh.write("label,variant,m,lambda,seed,status,psnr,ssim,mm_recall,mm_w1\n")
        for label, c, res in results:
            if res is None:
                fh.write(f"{label},{c.variant},{c.m_hypotheses},{c.lam!r},{c.seed},failed,,,,\n")
                continue
            rws, _ = res
            for r in rws:
                r.variant = f"{label}@{c.seed}"
            rows += rws
            a = summarize(rws, "all").get(rws[0].variant, {})
            m = summarize(rws, "multimodal").get(rws[0].variant, {})
            fh.write(f"{label},{c.variant},{c.m_hypotheses},{c.lam!r},{c.seed},ok,{a.get('psnr', float('nan'))!r},"
                     f"{a.get('ssim', float('nan'))!r},{m.get('mode_recall', float('nan'))!r},"
                     f"{m.get('dist_w1', float('nan'))!r}\n")
    write_metrics_csv(os.path.join(run, "metrics.csv"), rows)
    labels = list(dict.fromkeys(label for label, _, res in results if res is not None))
    means = [np.mean([summarize(res[0], "all")[f"{lab}@{c.seed}"]["psnr"] for lab2, c, res in results
                      if lab2 == lab and res is not None]) for lab in labels]
    if labels:
        report.write(os.path.join(run, "psnr.svg"), report.bar_chart(labels, means, title="held-out PSNR",
                                                                     ylabel="dB"))
    print(run)


def _collect(fn, label, c):
    try:
        return fn()
    except (DivergedError, ConfigurationError) as exc:
        log.error("ablation run %s seed %d failed: %s", label, c.seed, exc)
        return None


COMMANDS = {"config-init": cmd_config_init, "gen-scene": cmd_gen_scene, "train-prior": cmd_train_prior,
            "train-nerf": cmd_train_nerf, "eval": cmd_eval, "ablate": cmd_ablate, "render": cmd_render}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"carvenerf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"carvenerf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergedError, ConfigurationError, OSError) as exc:
        print(f"carvenerf: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
