"""``ufedgan`` command-line entry point.

    ufedgan partition|run|attack|evaluate --config FILE [--seed S] [--rounds R] [--out DIR]

Exit status: 0 success, 2 config error, 3 data error, 4 protocol error,
5 numerical error.
"""
import argparse
import sys
from pathlib import Path

from . import experiment
from .errors import ConfigError, UFedGanError
from .metrics import write_metric_csv
from .transport import transcript_import


def _parser():
    p = argparse.ArgumentParser(prog="ufedgan", description="Split federated GAN experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="TOML experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--rounds", type=int, help="override protocol.max_rounds")
        sp.add_argument("--out", help="override output.dir")
        return sp

    common("partition", "split the data across users and print the per-class counts")
    common("run", "train every user's GAN under the split protocol")
    sp = common("attack", "replay an eavesdropped transcript as the attacker")
    sp.add_argument("--transcript", help="a .ufgt file (default: <out>/transcripts/user<U>.ufgt)")
    sp.add_argument("--user", type=int, default=0)
    sp.add_argument("--downlink", action="store_true", help="also load intercepted discriminator weights")
    sp = common("evaluate", "score a generator checkpoint or a synthetic sample set")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="generator checkpoint (.ufgc)")
    src.add_argument("--synthetic", help="sample set (.npy)")
    sp.add_argument("--samples", type=int, help="number of samples drawn from a checkpoint")
    return p


def _partition(cfg, args):
    _, text = experiment.run_partition(cfg)
    print(text, end="")


def _run(cfg, args):
    result = experiment.run_experiment(cfg)
    for r in result.summary:
        print(f"{r.role} user {r.user}: IS {r.inception_score:.4f}"
              + (f" FID {r.fid:.4f}" if r.fid is not None else "")
              + (f" SSIM {r.ssim:.4f}" if r.ssim is not None else ""))
    print(f"outputs in {cfg.out_dir}")


def _attack(cfg, args):
    path = Path(args.transcript) if args.transcript else cfg.out_dir / "transcripts" / f"user{args.user}.ufgt"
    if not path.exists():
        raise ConfigError(f"{path}: transcript not found")
    transcript = transcript_import(path)
    if args.downlink:
        cfg.attacker.direction = "both"
    prepared = experiment.prepare(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    result = experiment.attack(cfg, transcript, args.user, prepared)
    write_metric_csv(cfg.out_dir / f"attack_user{args.user}.csv", [result.report])
    r = result.report
    print(f"attacker user {args.user}: {result.state.cursor} updates replayed, IS {r.inception_score:.4f}"
          + (f" FID {r.fid:.4f}" if r.fid is not None else "")
          + (f" SSIM {r.ssim:.4f}" if r.ssim is not None else ""))


def _evaluate(cfg, args):
    prepared = experiment.prepare(cfg)
    report, accuracy = experiment.evaluate_artifact(cfg, prepared, args.checkpoint, args.synthetic, args.samples)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_metric_csv(cfg.out_dir / "evaluation.csv", [report])
    print(f"IS {report.inception_score:.4f}" + (f" FID {report.fid:.4f}" if report.fid is not None else "")
          + (f" SSIM {report.ssim:.4f}" if report.ssim is not None else ""))
    for name, acc in accuracy.items():
        print(f"linear evaluation ({name} training set): accuracy {acc:.4f}")


COMMANDS = {"partition": _partition, "run": _run, "attack": _attack, "evaluate": _evaluate}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = experiment.load_config(args.config, args.seed, args.rounds, args.out)
        COMMANDS[args.command](cfg, args)
    except UFedGanError as exc:
        print(f"ufedgan {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
