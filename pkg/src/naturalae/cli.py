"""Command-line driver: ``naturalae <subcommand> --config <path> [--threads N] [--seed S]``.

Exit codes: 0 success, 1 config error, 2 missing upstream artifact,
3 numerical abort.
"""

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources

from threadpoolctl import threadpool_limits

from . import detector, evaluation
from .attack import AttackAborted, run_attack
from .config import ConfigError, load_config, parse_variant
from .corpus import make_scenes, weathered_signs
from .imaging import SIGN_RED, SIGN_WHITE, load_ppm, render_stop_sign
from .rps import NoiseSet, NoiseSetError, extract_noise_set

log = logging.getLogger("naturalae")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class MissingArtifact(RuntimeError):
    def __init__(self, path, hint):
        super().__init__(f"missing upstream artifact: {path} (run `naturalae {hint}` first)")
        self.path = path


def default_config_path():
    return str(resources.files("naturalae") / "default.ini")


# ---------------------------------------------------------------- layout


def _out(cfg, *parts):
    path = os.path.join(cfg.output_dir, *parts)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def _need(path, hint):
    if not os.path.exists(path):
        raise MissingArtifact(path, hint)
    return path


def _variant_name(variant):
    arch, replica = parse_variant(variant)
    return f"{arch}_{replica}"


def model_path(cfg, variant):
    return os.path.join(cfg.output_dir, "models", _variant_name(variant) + ".naew")


def sign_path(cfg):
    return os.path.join(cfg.output_dir, "attack", "attack_sign.ppm")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _scenes(cfg):
    return make_scenes(size=cfg["data.image_size"])


# -------------------------------------------------------------- commands


def cmd_gen_data(cfg, args=None):
    size = cfg["data.image_size"]
    tcfg = cfg.transform_config()
    for name, n, stream in (("train", cfg["data.train_samples"], "data"), ("test", cfg["data.test_samples"], "test")):
        samples = detector.generate_dataset(n, cfg.stream_seed(stream), size, tcfg)
        path = _out(cfg, "data", f"{name}.naes")
        detector.save_dataset(samples, path)
        log.info("wrote %s (%d scenes)", path, n)
    return EXIT_OK


def cmd_train(cfg, args=None):
    variants = [args.arch] if args is not None and getattr(args, "arch", None) else list(cfg["train.variants"])
    train = detector.load_dataset(_need(os.path.join(cfg.output_dir, "data", "train.naes"), "gen-data"))
    test = detector.load_dataset(_need(os.path.join(cfg.output_dir, "data", "test.naes"), "gen-data"))
    archs = sorted(detector.ARCHITECTURES)
    for v in variants:
        arch, replica = parse_variant(v)
        seed = cfg.stream_seed("train", archs.index(arch), replica)
        model = detector.train_detector(
            train, arch, cfg["train.epochs"], seed, cfg["train.batch_size"], cfg["train.lr"], log_every=5
        )
        path = _out(cfg, "models", _variant_name(v) + ".naew")
        detector.save_model(model, path)
        acc = detector.clean_accuracy(model, test)
        _write_json(
            path[:-5] + ".json",
            {"variant": v, "arch": arch, "seed": seed, "threshold": model.threshold, "clean_accuracy": acc,
             "loss_history": list(getattr(model, "history", []))},
        )
        log.info("trained %s: clean accuracy %.4f", v, acc)
    return EXIT_OK


def _noise_set(cfg):
    size = cfg["data.image_size"]
    _, regions = render_stop_sign(size)
    images = weathered_signs(cfg["rps.sources"], size, cfg.stream_seed("noise"))
    return extract_noise_set(images, regions.support, SIGN_RED, SIGN_WHITE, cfg["rps.tau"])


def cmd_extract_noise(cfg, args=None):
    noise = _noise_set(cfg)
    path = _out(cfg, "noise", "noise_set.txt")
    noise.save(path)
    log.info("wrote %s (%d colours)", path, len(noise))
    return EXIT_OK


def cmd_attack(cfg, args=None):
    target = cfg["attack.target"]
    mpath = _need(getattr(args, "model", None) or model_path(cfg, target), "train")
    npath = _need(os.path.join(cfg.output_dir, "noise", "noise_set.txt"), "extract-noise")
    model = detector.load_model(mpath)
    noise = NoiseSet.load(npath)
    sign, regions = render_stop_sign(cfg["data.image_size"])
    acfg = cfg.attack_config()

    def progress(i, value, terms):
        if i % 100 == 0:
            log.info("iter %d objective %.4f eot %.4f", i, value, terms["eot_loss"])

    result = run_attack(model, sign, regions, acfg, _scenes(cfg), noise, cfg.transform_config(), progress)
    outdir = os.path.dirname(_out(cfg, "attack", "x"))
    result.save(outdir)
    _write_json(
        os.path.join(outdir, "attack_summary.json"),
        {"model": os.path.basename(mpath), "iterations": result.iterations, "stop_reason": result.stop_reason,
         "final_objective": result.trace[-1] if result.trace else None,
         "size_255": evaluation.perturbation_size(result.adversarial, sign, "255")},
    )
    log.info("attack stopped after %d iterations (%s)", result.iterations, result.stop_reason)
    return EXIT_OK


def _load_sign(path):
    return load_ppm(_need(path, "attack"))


def _eval_one(cfg, model, model_name, clean, adv, sign_name, env, threads):
    scenes = _scenes(cfg)
    grid = evaluation.default_grid(env, cfg.stream_seed("eval"), len(scenes), clean.shape[0], scenes[0].shape[:2])
    rep = evaluation.success_rate(model, clean, adv, grid, scenes, threads=threads)
    rep.model, rep.sign = model_name, sign_name
    return rep


def cmd_eval(cfg, args=None):
    threads = getattr(args, "threads", 1) or 1
    mpath = _need(getattr(args, "model", None) or model_path(cfg, cfg["attack.target"]), "train")
    spath = getattr(args, "sign", None) or sign_path(cfg)
    adv = _load_sign(spath)
    model = detector.load_model(mpath)
    clean, _ = render_stop_sign(adv.shape[0])
    for env in cfg["eval.environments"]:
        for tag, sign, sname in (("", adv, os.path.basename(spath)), ("_clean", clean, "clean")):
            rep = _eval_one(cfg, model, os.path.basename(mpath), clean, sign, sname, env, threads)
            rep.write_csv(_out(cfg, "eval", f"eval_{env}{tag}.csv"))
            rep.write_json(_out(cfg, "eval", f"eval_{env}{tag}.json"))
            log.info("%s %s: R_s = %s (%d/%d)", env, sname, rep.summary()["R_s"], rep.numerator, rep.denominator)
    return EXIT_OK


def cmd_transfer(cfg, args=None):
    threads = getattr(args, "threads", 1) or 1
    mpaths = getattr(args, "models", None) or [model_path(cfg, v) for v in cfg["train.variants"]]
    spaths = getattr(args, "signs", None) or [sign_path(cfg)]
    models = [detector.load_model(_need(p, "train")) for p in mpaths]
    signs = [_load_sign(p) for p in spaths]
    clean, _ = render_stop_sign(signs[0].shape[0])
    env = "outdoor" if "outdoor" in cfg["eval.environments"] else cfg["eval.environments"][0]
    rows = []
    for sp, sign in [("clean", clean)] + list(zip(spaths, signs)):
        row = []
        for mp, model in zip(mpaths, models):
            rep = _eval_one(cfg, model, os.path.basename(mp), clean, sign, os.path.basename(sp), env, threads)
            row.append(rep.rate)
        rows.append((os.path.basename(sp), row))
    names = [os.path.basename(p) for p in mpaths]
    with open(_out(cfg, "transfer", "transfer.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sign"] + names)
        for sname, row in rows:
            w.writerow([sname] + ["undefined" if r is None else repr(r) for r in row])
    _write_json(
        _out(cfg, "transfer", "transfer.json"),
        {"environment": env, "models": names,
         "rows": {s: ["undefined" if r is None else r for r in row] for s, row in rows}},
    )
    return EXIT_OK


def _pct(v):
    return "undefined" if not isinstance(v, (int, float)) else f"{100 * v:.2f}%"


def cmd_report(cfg, args=None):
    out = cfg.output_dir
    evals = {}
    for env in cfg["eval.environments"]:
        for tag in ("", "_clean"):
            p = os.path.join(out, "eval", f"eval_{env}{tag}.json")
            if os.path.exists(p):
                with open(p) as fh:
                    evals[(env, tag)] = json.load(fh)
    tpath = os.path.join(out, "transfer", "transfer.json")
    if not evals and not os.path.exists(tpath):
        raise MissingArtifact(os.path.join(out, "eval"), "eval")
    lines = ["# naturalae report", "", "## Attack success rate", "", "| sign | environment | R_s | fooled / detected | size (0-255) |",
             "|---|---|---|---|---|"]
    for (env, tag), s in sorted(evals.items()):
        lines.append(f"| {s['sign']} | {env} | {_pct(s['R_s'])} | {s['fooled']}/{s['clean_detected']} | {s['size']:.2f} |")
    if os.path.exists(tpath):
        with open(tpath) as fh:
            t = json.load(fh)
        lines += ["", f"## Transfer ({t['environment']})", "", "| sign | " + " | ".join(t["models"]) + " |",
                  "|---|" + "---|" * len(t["models"])]
        for sname, row in sorted(t["rows"].items()):
            lines.append(f"| {sname} | " + " | ".join(_pct(v) for v in row) + " |")
    path = _out(cfg, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract-noise": cmd_extract_noise,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="experiment INI file (default: bundled config)")
    common.add_argument("--threads", type=int, default=1, help="worker cap for the evaluation sweep")
    common.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="naturalae", description="Natural adversarial stop-sign experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render training and test scenes")
    p = sub.add_parser("train", parents=[common], help="train detector variants")
    p.add_argument("--arch", help="single variant to train, e.g. wide/0")
    sub.add_parser("extract-noise", parents=[common], help="build the real-world noise colour set")
    p = sub.add_parser("attack", parents=[common], help="craft the adversarial sign")
    p.add_argument("--model")
    p = sub.add_parser("eval", parents=[common], help="success rate on the indoor/outdoor grids")
    p.add_argument("--model")
    p.add_argument("--sign")
    p = sub.add_parser("transfer", parents=[common], help="success rate against every detector variant")
    p.add_argument("--models", nargs="+")
    p.add_argument("--signs", nargs="+")
    sub.add_parser("report", parents=[common], help="collate results into report.md")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config or default_config_path(), seed=args.seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](cfg, args)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NoiseSetError as e:
        print(f"config error: [rps] {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AttackAborted, detector.TrainingDiverged, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
