"""Command-line entry point.

Every subcommand takes ``--config`` (a RunConfig JSON file), ``--seed`` and
``--out`` (output directory) and writes a ``manifest.json`` next to its
outputs.  Exit status: 0 success, 1 user error, 2 internal assertion.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import dcpd, evalkit, experiments, gradcheck, objectives, reports, synthbench, ufa
from .config import ConfigError, RunConfig
from .container import ContainerError, read_container, write_container
from .core_math import ContractError, ParameterError, RngState, sample_gumbel

log = logging.getLogger("opengcd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- on-disk layouts -------------------------------------------------------------

def features_entries(data: objectives.FeatureData, prefix=""):
    return {prefix + "F_patch": data.F_patch, prefix + "f_cls": data.f_cls, prefix + "A_cls": data.A_cls,
            prefix + "labels": data.labels, prefix + "classes": np.asarray(data.classes, dtype=np.int64)}


def load_features(entries, prefix=""):
    try:
        F = np.asarray(entries[prefix + "F_patch"], dtype=np.float64)
        c = np.asarray(entries[prefix + "f_cls"], dtype=np.float64)
        A = np.asarray(entries[prefix + "A_cls"], dtype=np.float64)
    except KeyError as exc:
        raise UsageError(f"feature file lacks entry {exc}") from None
    if F.ndim == 2:  # a single PatchFeatureSet
        F, c, A = F[None], c[None], A[None] if A.ndim == 2 else A
    labels = entries.get(prefix + "labels", np.zeros(len(F), dtype=np.int64))
    classes = tuple(int(v) for v in entries.get(prefix + "classes", np.unique(labels)))
    return objectives.FeatureData(F, c, A, np.asarray(labels, dtype=np.int64), classes)


def model_entries(params: objectives.Parameters, stats: ufa.ClassStats):
    out = {f"param/{n}": v for n, v in params.items()}
    ready = stats.initialized_classes
    out["stats/known"] = np.asarray(stats.known, dtype=np.int64)
    out["stats/ready"] = np.asarray(ready, dtype=np.int64)
    out["stats/mu"] = np.array([stats.mu[y] for y in ready]).reshape(len(ready), stats.dim)
    out["stats/sigma"] = np.array([stats.sigma[y] for y in ready]).reshape(len(ready), stats.dim, stats.dim)
    return out


def load_model(path, cfg: RunConfig):
    e = read_container(path)
    try:
        params = objectives.Parameters(**{n: np.asarray(e[f"param/{n}"], dtype=np.float64)
                                          for n in objectives.PARAM_NAMES})
        known = e["stats/known"].tolist()
        stats = ufa.ClassStats(known, params.W.shape[1], cfg.alpha1, cfg.alpha2, cfg.ridge)
        for y, mu, sig in zip(e["stats/ready"].tolist(), e["stats/mu"], e["stats/sigma"]):
            stats.mu[y] = np.asarray(mu, dtype=np.float64)
            s = np.asarray(sig, dtype=np.float64)
            stats.sigma[y] = 0.5 * (s + s.T)
    except KeyError as exc:
        raise UsageError(f"{path} is not a model file: missing {exc}") from None
    return params, stats


def task_entries(task: synthbench.SynthTask):
    return {"means": task.means, "sigmas": task.sigmas, "known": np.asarray(task.known, dtype=np.int64),
            "source_x": task.source_x, "source_y": task.source_y,
            "target_x": task.target_x, "target_y": task.target_y,
            "shift_rotation": task.shift.rotation, "shift_translation": task.shift.translation,
            "delta_inter": np.float64(task.delta_inter), "sigma2_intra": np.float64(task.sigma2_intra)}


def _source(args, cfg):
    """Training features: from ``--features`` if given, else synthesised from (config, seed)."""
    if args.features:
        return None, load_features(read_container(args.features))
    task, source, target = experiments.prepare(cfg, cfg.seed)
    return task, source


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args, cfg, out):
    task, source, target = experiments.prepare(cfg, cfg.seed)
    paths = [out / "task.ften", out / "source.ften", out / "target.ften"]
    write_container(paths[0], task_entries(task))
    write_container(paths[1], features_entries(source))
    write_container(paths[2], features_entries(target))
    info = {"n_source": len(source), "n_target": len(target), "known": list(task.known),
            "novel": list(task.novel), "delta_inter": task.delta_inter, "sigma2_intra": task.sigma2_intra}
    reports.write_json(out / "task.json", info)
    paths.append(out / "task.json")
    print(f"synth: {len(source)} source / {len(target)} target samples, "
          f"{len(task.known)} known of {task.n_classes} classes -> {out}")
    return paths


def cmd_fit(args, cfg, out):
    _, source = _source(args, cfg)
    result = objectives.train(source, cfg, RngState(cfg.seed).spawn(2))
    paths = [out / "params.ften", out / "loss_history.csv"]
    write_container(paths[0], model_entries(result.params, result.stats))
    reports.write_loss_history(paths[1], result.history)
    last = result.history[-1].total if result.history else float("nan")
    print(f"fit: {len(result.history)} steps, final total loss {last:.4f} -> {out}")
    return paths


def _model_or_init(args, cfg, dim, n_known):
    if args.params:
        return load_model(args.params, cfg)
    params = objectives.Parameters.from_config(RngState(cfg.seed).spawn(2).spawn(1), dim, n_known, cfg)
    return params, ufa.ClassStats(tuple(range(n_known)), cfg.embed_dim, cfg.alpha1, cfg.alpha2, cfg.ridge)


def cmd_route(args, cfg, out):
    if not args.features:
        raise UsageError("route needs --features FILE")
    data = load_features(read_container(args.features))
    params, _ = _model_or_init(args, cfg, data.F_patch.shape[-1], max(len(data.classes), 1))
    V = {n: ag.const(v) for n, v in params.items()}
    prior = dcpd.attention_priors((data.F_patch, data.A_cls), cfg.rho)
    noise = None
    if args.stochastic:
        noise = sample_gumbel(RngState(cfg.seed).spawn(5), data.F_patch.shape[:2] + (cfg.n_parts,))
    _, ex = dcpd.embed(V, data.F_patch, data.f_cls, prior, cfg.tau, noise, True, cfg.attn_heads)
    H = ex["H"].value
    parts = H.argmax(axis=-1)
    pue = dcpd.parts_usage_entropy(list(H))
    soft = dcpd.soft_allocation_entropy(list(ex["H_soft"].value))
    paths = [out / "routing.csv", out / "route.json"]
    reports.write_routing(paths[0], parts)
    reports.write_json(paths[1], {"pue": pue, "soft_entropy": soft, "n_images": len(data), "tau": cfg.tau,
                                  "n_parts": cfg.n_parts,
                                  "part_usage": np.bincount(parts.ravel(), minlength=cfg.n_parts)})
    print(f"route: {len(data)} images, PUE {pue:.4f} -> {out}")
    return paths


def cmd_ood_sample(args, cfg, out):
    if not args.params:
        raise UsageError("ood-sample needs --params FILE (a fit output)")
    _, stats = load_model(args.params, cfg)
    n = cfg.n_ood if args.n is None else args.n
    batch = ufa.propose_ood(stats, RngState(cfg.seed).spawn(6), n, cfg.ood_split, cfg.beta, cfg.mix_k,
                            cfg.mix_sigma)
    paths = [out / "ood.ften", out / "ood.json"]
    write_container(paths[0], {"z": batch.z, "tag": batch.tags})
    reports.write_json(paths[1], {"tags": list(ufa.TAGS), "counts": dict(zip(ufa.TAGS, batch.counts()))})
    print(f"ood-sample: {len(batch)} samples " + ", ".join(f"{t}={c}" for t, c in zip(ufa.TAGS, batch.counts())))
    return paths


def cmd_eval(args, cfg, out):
    rng = RngState(cfg.seed).spawn(3)
    if args.predictions:
        e = read_container(args.predictions)
        try:
            pred, truth = e["pred"], e["truth"]
        except KeyError as exc:
            raise UsageError(f"prediction file lacks entry {exc}") from None
        old = e.get("old", np.unique(truth))
        acc = evalkit.hungarian_acc(pred, truth, old.tolist())
        report = {"acc_all": acc[0], "acc_old": acc[1], "acc_new": acc[2], "auroc": None, "k_estimated": None,
                  "k_used": int(len(np.unique(pred)))}
    else:
        if not (args.features and args.params):
            raise UsageError("eval needs --predictions FILE, or --features FILE with --params FILE")
        data = load_features(read_container(args.features))
        params, stats = load_model(args.params, cfg)
        z = objectives.embed_data(params, data, cfg)
        known = stats.known
        K = args.k
        rep = evalkit.cluster_and_score(z, data.labels, known, rng, K=K, estimate=args.estimate_k,
                                        k_range=(args.k_min, args.k_max) if args.k_max else None)
        novel = ~np.isin(data.labels, known)
        ent = evalkit.entropy_scores(params.classifier(cfg), z)
        au = evalkit.auroc(ent, novel.astype(int)) if novel.any() and (~novel).any() else None
        report = {"acc_all": rep.acc_all, "acc_old": rep.acc_old, "acc_new": rep.acc_new, "auroc": au,
                  "k_estimated": rep.k_estimated, "k_used": rep.k_used, "inertia": rep.inertia,
                  "matching": rep.to_dict()["matching"]}
        reports.write_csv(out / "assignments.csv", ["sample", "label", "cluster"],
                          zip(range(len(z)), data.labels.tolist(), rep.assignments.tolist()))
    path = out / "report.json"
    reports.write_json(path, report)
    print(f"eval: acc_all {report['acc_all']:.3f}" + (f", AUROC {report['auroc']:.3f}" if report["auroc"] is not None else ""))
    return [path] + ([out / "assignments.csv"] if not args.predictions else [])


def cmd_gradcheck(args, cfg, out):
    results = gradcheck.run_suite(cfg.seed, args.configs)
    worst = max(results, key=lambda r: r.max_rel_error)
    rows = [(r.seed, r.max_rel_error, r.worst_param, r.n_params) for r in results]
    path = out / "gradcheck.csv"
    reports.write_csv(path, ["seed", "max_rel_error", "worst_param", "n_params"], rows)
    print(f"gradcheck: {len(results)} configurations, max relative error {worst.max_rel_error:.3e} "
          f"({worst.worst_param})")
    if not worst.max_rel_error < args.tol:
        raise AssertionError(f"gradient check failed: {worst.max_rel_error:.3e} >= {args.tol:g}")
    return [path]


def cmd_calib(args, cfg, out):
    prepared = experiments.prepare(cfg, cfg.seed)
    runs = {v: experiments.run(cfg, cfg.seed, v, prepared) for v in ("full", "no_ufa")}
    hi = max(max(r.entropy_seen.max(), r.entropy_novel.max()) for r in runs.values())
    rows = []
    for v, r in runs.items():
        edges, hs, hn = reports.entropy_histogram(r.entropy_seen, r.entropy_novel, args.bins, hi)
        rows += [(v, edges[i], edges[i + 1], hs[i], hn[i]) for i in range(args.bins)]
    paths = [out / "entropy_hist.csv", out / "calib.json"]
    reports.write_csv(paths[0], ["variant", "bin_lo", "bin_hi", "seen", "novel"], rows)
    reports.write_json(paths[1], {v: {"auroc": r.auroc, "acc_all": r.acc_all, "acc_old": r.acc_old,
                                      "acc_new": r.acc_new} for v, r in runs.items()})
    print("calib: " + ", ".join(f"{v} AUROC {r.auroc:.3f}" for v, r in runs.items()))
    return paths


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "route": cmd_route, "ood-sample": cmd_ood_sample,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "calib": cmd_calib}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="RunConfig JSON file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="opengcd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="emit a synthetic task and its patch features")
    s = sub.add_parser("fit", parents=[common], help="train; emit params and the loss history")
    s.add_argument("--features", type=Path, help="source FeatureData file (synthesised if omitted)")
    s = sub.add_parser("route", parents=[common], help="parts routing over a feature file")
    s.add_argument("--features", type=Path)
    s.add_argument("--params", type=Path)
    s.add_argument("--stochastic", action="store_true", help="add Gumbel noise before routing")
    s = sub.add_parser("ood-sample", parents=[common], help="emit a tagged outlier batch")
    s.add_argument("--params", type=Path)
    s.add_argument("--n", type=int)
    s = sub.add_parser("eval", parents=[common], help="cluster and score")
    s.add_argument("--predictions", type=Path, help="FTEN with pred, truth and optional old entries")
    s.add_argument("--features", type=Path)
    s.add_argument("--params", type=Path)
    s.add_argument("--k", type=int)
    s.add_argument("--estimate-k", action="store_true")
    s.add_argument("--k-min", type=int, default=2)
    s.add_argument("--k-max", type=int)
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--configs", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-4)
    s = sub.add_parser("calib", parents=[common], help="entropy histograms and AUROC with and without UFA")
    s.add_argument("--bins", type=int, default=20)
    return p


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("opengcd: error: a command is required")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_json())
            return 0
        args.out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, cfg, args.out)
        reports.write_manifest(args.out, args.command, cfg, cfg.seed, outputs)
        return 0
    except (UsageError, ConfigError, ContainerError, ContractError, ParameterError,
            json.JSONDecodeError, FileNotFoundError, IsADirectoryError) as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"internal assertion: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
