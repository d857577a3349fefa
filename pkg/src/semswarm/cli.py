"""Headless command line for running evolutions.

Exit codes: 0 on completion, 2 on configuration errors, 3 when the remote
embedding service fails.
"""

from __future__ import annotations

import argparse
import sys

from .cmaes import CmaConfig
from .errors import EmbedServiceError
from .evolution import EvolutionConfig, evolve, history_to_lines
from .prompt2param import bundled_dataset, train_mapping
from .semantic import RemoteEmbedClient, oracle_embed_text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evolve",
        description="Evolve swarm behavior toward a natural-language prompt.",
    )
    parser.add_argument("--prompt", required=True)
    parser.add_argument("--generations", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--embedder", choices=("oracle", "remote"),
                        default="oracle")
    parser.add_argument("--endpoint", default=None,
                        help="embedding service URL (remote embedder)")
    parser.add_argument("--out", required=True, help="run log path (.jsonl)")
    parser.add_argument("--agents", type=int, default=512)
    parser.add_argument("--steps", type=int, default=240)
    parser.add_argument("--frames", type=int, default=3)
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = EvolutionConfig(
            n_agents=args.agents,
            sim_steps=args.steps,
            frames_per_eval=args.frames,
            generations=args.generations,
            cma=CmaConfig(seed=args.seed),
            embedder=args.embedder,
            endpoint=args.endpoint,
            run_seed=args.seed,
            workers=args.workers,
        )
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.embedder == "remote":
        text_embedder = RemoteEmbedClient(args.endpoint).embed_text
    else:
        text_embedder = oracle_embed_text

    def progress(record):
        if not args.quiet:
            print(
                f"generation {record.generation:3d}  "
                f"best {record.best_loss:.4f}  diversity {record.diversity:.4f}"
                + ("  [noise]" if record.noise_injected else "")
            )

    try:
        mapping = train_mapping(bundled_dataset(), text_embedder)
        history = evolve(args.prompt, config, mapping, on_generation=progress)
    except EmbedServiceError as exc:
        print(f"embedding service failure: {exc}", file=sys.stderr)
        return 3

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(history_to_lines(history)) + "\n")
    if not args.quiet:
        _, best = history.best_so_far()
        print(f"done: {len(history.records)} generations, best loss {best:.4f}")
        print(f"run log written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
