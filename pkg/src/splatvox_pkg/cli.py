"""
Command-line entry points: `splatvox` for builds and exports, `splatvox-app` for the dashboard.
"""
import argparse
import logging
import sys
from pathlib import Path

from splatvox_pkg import pipeline
from splatvox_pkg.config import load_config, with_overrides
from splatvox_pkg.errors import ConfigError, SplatvoxError

logger = logging.getLogger(__name__)

def _seed(value):
    seed = int(value)
    if seed < 0 or seed >= 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return seed

def _frames(value):
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"--frames must be non-negative, got {value}")
    return n

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file.")
    common.add_argument("--seed", type=_seed, help="Override the configured seed.")
    common.add_argument("--out", help="Output directory (or file for exports).")
    common.add_argument("--frames", type=_frames, help="Number of synthetic frames.")
    common.add_argument("-v", "--verbose", action="store_true", help="Log debug messages.")

    parser = argparse.ArgumentParser(
        prog="splatvox",
        description="Incremental RGB-D mapping with instance fusion and Gaussian splatting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    build = sub.add_parser("build", parents=[common], help="Build a map from a synthetic scene or a replay dataset.")
    build.add_argument("--source", choices=pipeline.SOURCES, default="synthetic")
    build.add_argument("--manifest", help="Replay manifest (implies --source replay).")

    render = sub.add_parser("render", parents=[common], help="Render a built map at its camera poses.")
    render.add_argument("artifacts", nargs="?", help="Build directory. Defaults to the configured out_dir.")

    evaluate = sub.add_parser("eval", parents=[common], help="Evaluate a build against ground truth.")
    evaluate.add_argument("artifacts", nargs="?", help="Build directory. Defaults to the configured out_dir.")
    evaluate.add_argument("--manifest", help="Replay manifest providing ground-truth frames.")

    for name, help_text in (("export-mesh", "Write the marching-cubes mesh as PLY."),
                            ("export-splat", "Write the Gaussian field as splat PLY.")):
        export = sub.add_parser(name, parents=[common], help=help_text)
        export.add_argument("artifacts", nargs="?", help="Build directory. Defaults to the configured out_dir.")

    sub.add_parser("synth", parents=[common], help="Write the configured synthetic scene as a replay dataset.")
    return parser

def _dispatch(args):
    config = load_config(args.config)
    out_for_build = args.out if args.command in ("build", "synth") else None
    config = with_overrides(config, seed=args.seed, out_dir=out_for_build, n_frames=args.frames)

    if args.command == "build":
        source = "replay" if args.manifest else args.source
        if source == "replay" and args.frames is not None:
            raise ConfigError("--frames only applies to synthetic builds; a replay build uses every manifest frame.")
        report = pipeline.run_build(config, source=source, manifest=args.manifest)
        print(f"Built {report.n_frames} frames: {report.counts['instances']} instances, "
              f"{report.counts['gaussians']} Gaussians -> {config.out_dir}")
        return

    if args.command == "synth":
        manifest = pipeline.synth(config)
        print(f"Wrote {manifest}")
        return

    artifacts = Path(args.artifacts or config.out_dir)
    if args.command == "render":
        out_dir = Path(args.out) if args.out else artifacts / "renders"
        views = pipeline.run_render(artifacts, out_dir=out_dir)
        print(f"Rendered {len(views)} views -> {out_dir}")
    elif args.command == "eval":
        pipeline.run_eval(artifacts, manifest=args.manifest, out_dir=args.out)
        print((Path(args.out or artifacts) / "metrics.md").read_text())
    elif args.command == "export-mesh":
        out_path = Path(args.out) if args.out else artifacts / "mesh.ply"
        pipeline.export_mesh(artifacts, out_path)
        print(f"Wrote {out_path}")
    elif args.command == "export-splat":
        out_path = Path(args.out) if args.out else artifacts / "splat.ply"
        pipeline.export_splat(artifacts, out_path)
        print(f"Wrote {out_path}")

def main(argv=None):
    """
    Run the `splatvox` command.

    Returns:
        int: Exit code. 0 on success, 2 for configuration errors, 3 for data errors,
             4 for numerical failures, 1 for anything else.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except SplatvoxError as e:
        logger.error("%s", e)
        return e.exit_code
    except (ValueError, OSError) as e:
        logger.error("%s", e)
        return 1
    return 0

def run_app():
    """Launch the streamlit dashboard; extra arguments are passed to the app."""
    from streamlit.web import cli as stcli

    app_path = Path(__file__).parent / "streamlit_app" / "app.py"
    sys.argv = ["streamlit", "run", str(app_path), "--"] + sys.argv[1:]
    sys.exit(stcli.main())
