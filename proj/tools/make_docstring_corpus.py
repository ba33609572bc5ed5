#!/usr/bin/env python3
"""Build a plain-text corpus from the docstrings of installed Python sources.

Reads the standard library and site-packages by default. One docstring paragraph per line,
deduplicated, in sorted file order, so the output is deterministic for a given installation.
Stops once --max-tokens tokens have been written.
"""

import argparse
import ast
import re
import sys
import sysconfig
from pathlib import Path


def docstrings(tree):
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node, clean=True)
            if doc:
                yield doc


def paragraphs(doc):
    for block in re.split(r"\n\s*\n", doc):
        text = " ".join(block.split())
        # Skip doctest blocks and very short fragments.
        if text.startswith(">>>") or len(text.split()) < 4:
            continue
        yield text


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--root", type=Path, action="append", help="source tree (repeatable)")
    parser.add_argument("--min-tokens", type=int, default=1_000_000)
    parser.add_argument("--max-tokens", type=int, default=2_000_000)
    parser.add_argument("--skip-existing", action="store_true",
                        help="keep an existing output that already has --min-tokens tokens")
    args = parser.parse_args()

    if args.skip_existing and args.out.exists():
        with args.out.open(encoding="utf-8") as f:
            existing = sum(len(re.findall(r"[A-Za-z0-9]+", line)) for line in f)
        if existing >= args.min_tokens:
            print(f"{args.out}: keeping existing corpus ({existing} tokens)", file=sys.stderr)
            return 0

    paths = sysconfig.get_paths()
    roots = args.root or sorted({Path(paths[k]) for k in ("stdlib", "purelib", "platlib")})
    files = sorted({f for root in roots for f in root.rglob("*.py")})

    seen = set()
    tokens = 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", encoding="utf-8") as out:
        for path in files:
            if tokens >= args.max_tokens:
                break
            try:
                tree = ast.parse(path.read_text(encoding="utf-8"))
            except (SyntaxError, UnicodeDecodeError, ValueError):
                continue
            for doc in docstrings(tree):
                for para in paragraphs(doc):
                    if para in seen:
                        continue
                    seen.add(para)
                    out.write(para + "\n")
                    tokens += len(re.findall(r"[A-Za-z0-9]+", para))
                    if tokens >= args.max_tokens:
                        break

    print(f"{args.out}: {len(seen)} lines, {tokens} tokens", file=sys.stderr)
    if tokens < args.min_tokens:
        print(f"error: corpus has {tokens} tokens, fewer than {args.min_tokens}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
