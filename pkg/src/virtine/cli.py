"""Command-line entry points: virtine-serve and virtine-bench."""

import argparse
import logging
import sys
from pathlib import Path

from virtine.backend.mock import MockBackend
from virtine.bench.experiments import EXPERIMENTS
from virtine.bench.stats import summarize_measurements, write_csv
from virtine.client import (
    ServiceConfig,
    image_from_manifest,
    load_manifest,
    serve_echo,
    serve_http,
)
from virtine.core import CleanMode
from virtine.errors import VirtineError

log = logging.getLogger("virtine")

DEFAULT_MANIFEST = Path(__file__).resolve().parents[2] / "guest" / "manifest.json"


def _make_backend(name: str):
    if name == "hw":
        from virtine.backend.kvm import KvmBackend, install_timeout_support

        install_timeout_support()
        return KvmBackend()
    backend = MockBackend()
    from virtine.mockguests import register_standard_programs

    register_standard_programs(backend)
    return backend


def _auto_backend_name() -> str:
    from virtine.backend.kvm import kvm_available

    return "hw" if kvm_available() else "mock"


def _load_optional_manifest(path: str | None):
    candidate = Path(path) if path else DEFAULT_MANIFEST
    if candidate.is_file():
        return load_manifest(candidate)
    if path:  # explicitly requested but missing
        raise VirtineError(f"manifest {candidate} not found")
    return None


# -- virtine-serve ---------------------------------------------------------------


def serve_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="virtine-serve",
        description="Run the echo or static-file HTTP service, one virtine per request.",
    )
    parser.add_argument("service", choices=["echo", "http"])
    parser.add_argument("--root", metavar="DIR", help="document root (http)")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--pool", type=int, default=8, metavar="N",
                        help="shell pool capacity")
    parser.add_argument("--async-clean", action="store_true",
                        help="clean released shells in the background")
    parser.add_argument("--no-snapshot", action="store_true",
                        help="disable snapshot restore for the service image")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--backend", choices=["hw", "mock", "auto"], default="auto")
    parser.add_argument("--manifest", help="guest image manifest (defaults to guest/manifest.json)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    backend_name = args.backend if args.backend != "auto" else _auto_backend_name()
    try:
        backend = _make_backend(backend_name)
        config = ServiceConfig(
            host=args.host,
            port=args.port,
            document_root=args.root,
            pool_capacity=args.pool,
            release_mode=CleanMode.ASYNC if args.async_clean else CleanMode.SYNC,
            snapshot_enabled=not args.no_snapshot,
            workers=args.workers,
        )
        manifest = _load_optional_manifest(args.manifest) if backend_name == "hw" else None
        if args.service == "echo":
            image = (image_from_manifest(manifest, "echo") if manifest
                     else _mock_service_image("echo"))
            service = serve_echo(config, image, backend)
        else:
            if not args.root:
                parser.error("http requires --root")
            image = (image_from_manifest(manifest, "http") if manifest
                     else _mock_service_image("http"))
            service = serve_http(config, image, backend)
    except (VirtineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    log.info("serving %s on %s:%d (backend=%s, pool=%d)", args.service,
             args.host, args.port, backend_name, args.pool)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.shutdown()
    return 0


def _mock_service_image(name: str):
    from virtine.mockguests import mock_image

    return mock_image(name)


# -- virtine-bench ----------------------------------------------------------------


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="virtine-bench",
        description="Reproduce the latency experiments and emit CSV (and plots).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, spec in EXPERIMENTS.items():
        p = sub.add_parser(name, help=spec.summary)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--csv", metavar="PATH")
        p.add_argument("--plot", metavar="PATH")
        p.add_argument("--backend", choices=["hw", "mock", "auto"], default="auto")
        p.add_argument("--manifest", metavar="PATH")
        if name == "http":
            p.add_argument("--duration", type=float, default=3.0)
            p.add_argument("--concurrency", type=int, default=1)
        if name == "mode-latency":
            p.add_argument("-n", type=int, default=20, dest="fib_n")

    plot_parser = sub.add_parser("plot", help="render plots from an existing CSV")
    plot_parser.add_argument("--csv", required=True)
    plot_parser.add_argument("--plot", required=True, metavar="PATH")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "plot":
        from virtine.bench.plots import plot_csv

        out = plot_csv(args.csv, args.plot)
        print(f"wrote {out}")
        return 0

    spec = EXPERIMENTS[args.command]
    backend_name = args.backend if args.backend != "auto" else _auto_backend_name()
    if spec.needs_hw and backend_name != "hw":
        print(f"error: {args.command} requires hardware virtualization "
              f"(/dev/kvm), which is not available", file=sys.stderr)
        return 2

    try:
        manifest = _load_optional_manifest(args.manifest)
        if spec.needs_guests and manifest is None:
            print(f"error: {args.command} requires guest images; build guest/ "
                  f"and pass --manifest", file=sys.stderr)
            return 2
        backend = _make_backend(backend_name)

        from virtine.bench.experiments import pin_measurement_thread

        pinned = pin_measurement_thread()
        log.info("measuring thread %s", "pinned to its CPU" if pinned
                 else "not pinned (affinity control unavailable)")

        options = {"manifest": manifest}
        if args.trials is not None:
            options["trials"] = args.trials
        if args.command == "http":
            options["duration"] = args.duration
            options["concurrency"] = args.concurrency
        if args.command == "mode-latency":
            options["n"] = args.fib_n

        measurements = spec.fn(backend, **options)
    except VirtineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.csv:
        write_csv(args.csv, measurements)
        print(f"wrote {len(measurements)} rows to {args.csv}")
    _print_summary(measurements)

    if args.plot:
        if not args.csv:
            print("error: --plot requires --csv", file=sys.stderr)
            return 1
        from virtine.bench.plots import plot_csv

        print(f"wrote {plot_csv(args.csv, args.plot)}")
    return 0


def _print_summary(measurements) -> None:
    by_experiment: dict[str, list] = {}
    for m in measurements:
        by_experiment.setdefault(m.experiment, []).append(m)
    for experiment, rows in by_experiment.items():
        unit = rows[0].unit
        print(f"\n{experiment} ({unit})")
        print(f"  {'variant':<28} {'min':>12} {'median':>12} {'mean':>12} {'outliers':>9}")
        for row in summarize_measurements(rows):
            print(f"  {row.variant:<28} {row.min:>12.0f} {row.median:>12.0f} "
                  f"{row.mean:>12.0f} {row.outlier_count:>9}")


if __name__ == "__main__":
    sys.exit(bench_main())
