#!/usr/bin/env python3
"""
Merge Partition Results
Combines results_pX_of_Y.csv and rounds_pX_of_Y.jsonl from partitioned runs
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd

import config
from errors import ValidationError
from utils import banner, ok, saved, stat, warn
from utils.atomic_io import atomic_write_text, write_csv


def merge_result_files(data_dir: Path, total_partitions: int) -> pd.DataFrame:
    """Concatenate partition result tables, ordered by cell index"""
    banner("MERGING RESULT TABLES")
    frames = []
    for partition_x in range(1, total_partitions + 1):
        part = data_dir / f"results_p{partition_x}_of_{total_partitions}.csv"
        if part.exists():
            df = pd.read_csv(part)
            frames.append(df)
            ok(f"Loaded partition {partition_x}/{total_partitions}: {len(df):,} rows")
        else:
            warn(f"Partition {partition_x}/{total_partitions} not found: {part}")

    if not frames:
        raise ValidationError(f"no partition result files found in {data_dir}")

    merged = pd.concat(frames, ignore_index=True)
    if "cell" in merged:
        before = len(merged)
        merged = merged.drop_duplicates(subset=["cell"], keep="first").sort_values("cell", kind="stable")
        if before > len(merged):
            warn(f"Removed {before - len(merged):,} duplicate cells")
    return merged.reset_index(drop=True)


def merge_round_files(data_dir: Path, total_partitions: int) -> List[dict]:
    records = []
    for partition_x in range(1, total_partitions + 1):
        part = data_dir / f"rounds_p{partition_x}_of_{total_partitions}.jsonl"
        if not part.exists():
            continue
        for line in part.read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(json.loads(line))
    records.sort(key=lambda r: (r.get("cell", 0), r.get("seed", 0), r.get("round", 0)))
    return records


def merge_partitions(data_dir, total_partitions: int) -> pd.DataFrame:
    """
    Merge every partition of a run into results.csv / rounds.jsonl

    Args:
        data_dir: Directory holding the partition files
        total_partitions: The Y of --partition X --total Y

    Returns:
        Merged results table
    """
    data_dir = Path(data_dir)
    if total_partitions < 1:
        raise ValidationError("total partitions must be >= 1")
    if not data_dir.is_dir():
        raise ValidationError(f"data directory not found: {data_dir}")

    merged = merge_result_files(data_dir, total_partitions)
    write_csv(merged, data_dir / config.RESULTS_FILE, config.FLOAT_FORMAT)
    saved(f"Saved merged results: {data_dir / config.RESULTS_FILE}")

    records = merge_round_files(data_dir, total_partitions)
    if records:
        lines = [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records]
        atomic_write_text(data_dir / config.ROUNDS_FILE, "\n".join(lines) + "\n")
        saved(f"Saved merged rounds: {data_dir / config.ROUNDS_FILE}")

    banner("MERGE STATISTICS")
    stat(f"Cells: {len(merged):,}")
    stat(f"Round records: {len(records):,}")
    return merged


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description='Merge partition results')
    parser.add_argument('--partitions', type=int, required=True,
                        help='Total number of partitions to merge')
    parser.add_argument('--data-dir', type=str, default=config.DATA_DIR,
                        help=f'Directory containing partition files (default: {config.DATA_DIR})')
    args = parser.parse_args(argv)

    banner(f"MERGING {args.partitions} PARTITIONS", f"Data directory: {args.data_dir}")
    try:
        merge_partitions(args.data_dir, args.partitions)
    except ValidationError as e:
        print(f"✗ {e}", file=sys.stderr)
        return 1
    banner("✅ MERGE COMPLETE")
    return 0


if __name__ == "__main__":
    sys.exit(main())
