"""Minimal stdio worker used by the protocol tests.

Speaks the newline-delimited JSON worker protocol and answers evaluate
requests with deterministic synthetic curves. The first positional
argument selects a behavior:

  ok            well-formed results (default)
  short-curves  returns one curve fewer than folds * seeds
  out-of-range  returns a dice value above 1
  fail          reports status=failed with started=false
  fail-late     reports status=failed with started=true
  bad-version   answers the handshake with version 99
  wrong-id      answers with a result for a different job id
  malformed     emits a non-JSON line instead of the result
  slow-ok       sends a progress heartbeat, then the result
"""

import hashlib
import json
import sys


def emit(msg):
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def curves_for(msg):
    cfg = msg["train_config"]
    epochs, folds, seeds = cfg["epochs"], cfg["folds"], cfg["seeds"]
    digest = msg["ir"].get("genotype_digest", "")
    out = []
    for fold in range(folds):
        for seed in range(seeds):
            h = hashlib.sha256(f"{digest}|{fold}|{seed}".encode()).digest()
            top = 0.25 + (h[0] / 255.0) * 0.7
            dice = [round(top * (e + 1) / epochs, 6) for e in range(epochs)]
            out.append({"fold": fold, "seed": seed, "dice": dice})
    return out


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "ok"
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        kind = msg.get("type")
        if kind == "hello":
            version = 99 if mode == "bad-version" else 1
            emit({"type": "hello", "version": version})
        elif kind == "ping":
            emit({"type": "pong"})
        elif kind == "evaluate":
            if mode == "fail":
                emit({"type": "result", "id": msg["id"], "status": "failed",
                      "error": "dataset not found", "started": False})
                continue
            if mode == "fail-late":
                emit({"type": "result", "id": msg["id"], "status": "failed",
                      "error": "training diverged", "started": True})
                continue
            if mode == "malformed":
                sys.stdout.write("this is not json\n")
                sys.stdout.flush()
                continue
            if mode == "slow-ok":
                emit({"type": "progress", "id": msg["id"], "epoch": 1})
            curves = curves_for(msg)
            if mode == "short-curves":
                curves = curves[:-1]
            if mode == "out-of-range":
                curves[0]["dice"][-1] = 1.5
            job_id = "bogus" if mode == "wrong-id" else msg["id"]
            emit({"type": "result", "id": job_id, "status": "ok",
                  "curves": curves, "params_reported": 12345})
        else:
            emit({"type": "error", "message": f"unknown type {kind!r}"})


if __name__ == "__main__":
    main()
