import argparse
import json
import logging
import subprocess
import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from config.config import API_HOST, API_PORT, JSON_LOGS, LOG_DIR, LOG_LEVEL, LOG_TO_FILE  # noqa: E402
from imputad.errors import ImputadError  # noqa: E402
from logging_config import setup_logging  # noqa: E402

logger = logging.getLogger("runner")

COMMANDS = ("prepare", "train", "detect", "evaluate", "ablate", "synth", "serve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="runner.py", description="Imputation-diffusion anomaly detection experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="Experiment YAML file (default: built-in defaults)")
    parser.add_argument("--seed", type=int, help="Run this single seed instead of the configured seed list")
    parser.add_argument("--workers", type=int, help="Threads running inference window batches")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--mode", help="Ablation variant to train/detect/evaluate")
    parser.add_argument("--epochs", type=int, help="Training epochs")
    parser.add_argument("--checkpoint", help="Checkpoint for detect")
    parser.add_argument("--predictions", help="Predictions CSV for evaluate")
    parser.add_argument("--resume", help="Checkpoint to resume training from")
    parser.add_argument("--host", default=API_HOST, help="serve: bind address")
    parser.add_argument("--port", type=int, default=API_PORT, help="serve: port")
    return parser


def cli_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out:
        overrides["out_dir"] = args.out
    if args.mode:
        overrides["mode"] = args.mode
    if args.epochs is not None:
        overrides["train"] = {"epochs": args.epochs}
    return overrides


def run_api_server(host: str, port: int):
    """Runs the FastAPI server in a subprocess"""
    logger.info("Starting FastAPI server...", extra={'event_type': 'server_launch', 'host': host, 'port': port})
    try:
        subprocess.run([
            sys.executable, "-m", "uvicorn",
            "api.app:app", "--host", host,
            "--port", str(port)
        ], check=True)
    except subprocess.CalledProcessError as e:
        logger.error(f"API server process failed: {e}")
    except KeyboardInterrupt:
        logger.info("API server stopped via keyboard interrupt")


def dispatch(args: argparse.Namespace):
    # Imported here so `serve` and argument errors stay cheap
    from commands.ablation import cmd_ablate
    from commands.experiment import cmd_detect, cmd_evaluate, cmd_prepare, cmd_synth, cmd_train
    from config.experiment import load_config

    cfg = load_config(args.config, overrides=cli_overrides(args))
    if args.command == "prepare":
        return cmd_prepare(cfg)
    if args.command == "train":
        seeds = [args.seed] if args.seed is not None or args.resume else cfg.seeds
        return {"checkpoints": [cmd_train(cfg, seed=s, resume=args.resume) for s in seeds]}
    if args.command == "detect":
        seeds = [cfg.seed] if args.checkpoint else cfg.seeds
        return {"predictions": [cmd_detect(cfg, checkpoint=args.checkpoint, seed=s) for s in seeds]}
    if args.command == "evaluate":
        return [report.to_dict() for report in cmd_evaluate(cfg, predictions=args.predictions)]
    if args.command == "ablate":
        return cmd_ablate(cfg).to_dict(orient="records")
    if args.command == "synth":
        return {"dataset": cmd_synth(cfg)}
    raise ImputadError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(log_level=LOG_LEVEL, app_name="imputad", log_dir=LOG_DIR, json_logs=JSON_LOGS, log_to_file=LOG_TO_FILE)

    if args.command == "serve":
        run_api_server(args.host, args.port)
        return 0

    try:
        result = dispatch(args)
    except ImputadError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True,
                     extra={'event_type': 'command_failed', 'command': args.command, 'category': e.category})
        print(json.dumps({"error": e.category, "message": str(e)}), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"Unhandled exception: {e}", exc_info=True,
                     extra={'event_type': 'unhandled_exception', 'command': args.command})
        print(json.dumps({"error": ImputadError.category, "message": str(e)}), file=sys.stderr)
        return ImputadError.exit_code

    print(json.dumps(result, indent=2, default=str))
    logger.info(f"{args.command} finished", extra={'event_type': 'command_complete', 'command': args.command})
    return 0


if __name__ == "__main__":
    sys.exit(main())
