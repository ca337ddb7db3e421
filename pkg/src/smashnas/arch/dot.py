"""Graphviz export of memory-bank architectures.

One node per op, labelled with its output units ``N`` and dilation ``d``.
An edge ``a -> b`` labelled ``bank k`` means op ``b`` reads bank ``k`` after
op ``a`` has added into it; an op that reads a bank it also writes gets a
self-loop. Blocks are drawn as clusters.
"""

from __future__ import annotations

from .spec import ArchitectureSpec


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_graphviz(arch: ArchitectureSpec, name: str = "architecture") -> str:
    lines = [f"digraph {_quote(name)} {{", "  rankdir=TB;", "  node [shape=box];"]
    edges = []
    for b, block in enumerate(arch.blocks):
        lines.append(f"  subgraph cluster_block{b} {{")
        lines.append(f"    label={_quote(f'block {b}: {block.bank_count} banks x {block.bank_channels}')};")
        writers: dict[int, list[str]] = {}
        for i, op in enumerate(block.ops):
            node = f"b{b}_op{i}"
            dil = ",".join(str(d) for d in op.dilations)
            label = f"N={op.n_out} d={dil}"
            if arch.config.variant == "v2":
                label += f" k={','.join(map(str, op.filter_sizes))} g={op.groups}"
            lines.append(f"    {node} [label={_quote(label)}];")
            for bank in op.read_set:
                for src in writers.get(bank, []):
                    edges.append(f"  {src} -> {node} [label={_quote(f'bank {bank}')}];")
                if bank in op.write_set:
                    edges.append(f"  {node} -> {node} [label={_quote(f'bank {bank}')}];")
            for bank in op.write_set:
                writers.setdefault(bank, []).append(node)
        lines.append("  }")
    lines.extend(edges)
    lines.append("}")
    return "\n".join(lines) + "\n"
