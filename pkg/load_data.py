import argparse
import os

from safe_tune.data_tasks import TASK_KINDS, gen_task, save_jsonl

# --- Configuration ---
DATA_DIR = os.getenv("SAFE_TUNE_DATA_DIR", "data")
DEFAULT_SEED = int(os.getenv("SAFE_TUNE_DATA_SEED", "0"))


def generate_task_file(kind: str, n: int, seq_len: int, vocab: int, seed: int, marker_rate: float,
                       n_classes: int, out: str) -> str:
    """Writes a synthetic task as split-tagged JSONL, usable as task.path in a run config."""
    dataset = gen_task(kind, n, seq_len, vocab, seed, marker_rate=marker_rate, n_classes=n_classes)
    path = save_jsonl(dataset, out)
    counts = {name: len(dataset.split(name)) for name in ("train", "valid", "probe")}
    print(f"Wrote {len(dataset.examples)} {kind} examples to {path}")
    print(f"Splits: {counts}; label counts: {dataset.label_counts()}")
    return str(path)


def main():
    parser = argparse.ArgumentParser(description="Generate a synthetic task dataset as JSONL")
    parser.add_argument("--kind", choices=TASK_KINDS, default="parity")
    parser.add_argument("--n", type=int, default=10_000)
    parser.add_argument("--seq-len", type=int, default=32)
    parser.add_argument("--vocab", type=int, default=64)
    parser.add_argument("--marker-rate", type=float, default=0.1)
    parser.add_argument("--n-classes", type=int, default=2)
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--out", default=None, help="output path (default: $SAFE_TUNE_DATA_DIR/<kind>.jsonl)")
    args = parser.parse_args()

    out = args.out or os.path.join(DATA_DIR, f"{args.kind}.jsonl")
    generate_task_file(args.kind, args.n, args.seq_len, args.vocab, args.seed, args.marker_rate,
                       args.n_classes, out)


if __name__ == "__main__":
    main()
