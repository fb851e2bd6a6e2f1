#!/usr/bin/env python3
"""Stand-in for the kernel runner: speaks the line protocol without a GPU.

Kernel files steer the outcome with the same markers the simulated executor
uses. Flags: --crash-after N exits after N replies, --wrong-id answers with a
mangled job id, --latency-ms X sets the perf samples.
"""
import argparse
import hashlib
import json
import sys


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--crash-after", type=int, default=-1)
    ap.add_argument("--wrong-id", action="store_true")
    ap.add_argument("--latency-ms", type=float, default=0.5)
    args = ap.parse_args()

    served = 0
    for line in sys.stdin:
        if args.crash_after >= 0 and served >= args.crash_after:
            sys.exit(3)
        job = json.loads(line)
        try:
            with open(job["kernel_path"], encoding="utf-8") as f:
                src = f.read()
        except OSError as e:
            src = ""
            err = str(e)
        else:
            err = ""
        reply = {"job_id": job["job_id"] + ("-x" if args.wrong_id else ""), "status": "ok",
                 "latencies_ms": None, "logs": "", "outputs_digest": None}
        if err:
            reply.update(status="compile_fail", logs=err)
        elif "SIM_COMPILE_ERROR" in src:
            reply.update(status="compile_fail", logs="SyntaxError: invalid syntax")
        elif job["mode"] != "build" and "SIM_RUNTIME_ERROR" in src:
            reply.update(status="runtime_fail", logs="RuntimeError: illegal memory access")
        elif job["mode"] == "correctness" and "SIM_WRONG_OUTPUT" in src:
            reply.update(status="correctness_fail", logs="mismatch at index 3")
        else:
            digest = hashlib.sha256((job["mode"] + job["test_path"]).encode()).hexdigest()[:16]
            reply["outputs_digest"] = digest
            if job["mode"] == "perf":
                reply["latencies_ms"] = [args.latency_ms] * int(job["iterations"])
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
        served += 1


if __name__ == "__main__":
    main()
