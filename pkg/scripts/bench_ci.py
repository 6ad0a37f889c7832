import argparse
import json
import sys
import tempfile
import time
from pathlib import Path

# Ensure src/ is on path
_ROOT = Path(__file__).resolve().parents[1]
if str(_ROOT / "src") not in sys.path:
    sys.path.insert(0, str(_ROOT / "src"))

from scaleood.cli import main as cli_main


def measure_s(argv) -> float:
    t0 = time.perf_counter()
    code = cli_main(argv)
    t1 = time.perf_counter()
    if code != 0:
        raise RuntimeError(f"'{' '.join(argv[:1])}' exited with status {code}")
    return t1 - t0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="CI wall-clock gate for the synth -> eval pipeline")
    p.add_argument("--max-s", type=float, default=60.0, help="Max allowed end-to-end seconds (default: 60)")
    p.add_argument("--threads", type=int, default=1, help="Worker threads passed to both commands (default: 1)")
    p.add_argument("--workdir", help="Keep the benchmark here instead of a temporary directory")
    p.add_argument("--json", action="store_true", help="Emit JSON report")
    args = p.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        work = Path(args.workdir or tmp)
        common = ["--threads", str(args.threads), "-q"]
        try:
            synth_s = measure_s(["synth", "-o", str(work)] + common)
            eval_s = measure_s(["eval", "-m", str(work / "manifest.json"), "-o", str(work / "report.csv")] + common)
        except RuntimeError as e:
            print(f"FAIL: {e}")
            return 1

    total = synth_s + eval_s
    ok = total <= args.max_s
    result = {"synth_s": synth_s, "eval_s": eval_s, "total_s": total, "max_s": args.max_s, "ok": ok}
    if args.json:
        print(json.dumps(result, indent=2))
    else:
        print(f"synth={synth_s:.2f}s eval={eval_s:.2f}s total={total:.2f}s (limit {args.max_s} s) => {'OK' if ok else 'FAIL'}")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
