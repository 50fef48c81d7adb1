"""Terminal Formatter Module for the Retrosynthesis Engine."""

from typing import List, Mapping, Sequence

from src.matcher import AccuracyTable


def format_percent(value: float) -> str:
    """Percentage with one decimal, e.g. '87.5%'."""
    return f"{value:.1f}%"


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned first column, right-aligned others, two-space gutters."""
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]

    def line(cells: Sequence[str]) -> str:
        parts = [cells[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return '  '.join(parts).rstrip()

    rule = '  '.join('-' * w for w in widths)
    return '\n'.join([line(headers), rule] + [line(r) for r in rows])


def format_accuracy_table(table: AccuracyTable, title: str) -> str:
    """
    Render an accuracy table with one row per group.

    Example output:
        Top-k exact match (test)
        group    count   top1   top3
        -------  -----  -----  -----
        overall      5  80.0%  100.0%
    """
    headers = ['group', 'count'] + [f'top{k}' for k in table.ks]
    rows = []
    for row in table.rows():
        rows.append([row['group'], str(row['count'])] + [format_percent(row[f'top{k}']) for k in table.ks])
    return f"{title}\n{format_table(headers, rows)}"


def format_prediction(product: str, candidates: Sequence[Mapping]) -> str:
    """
    Ranked reactant sets for one product.

    Example output:
        CC(=O)NC
          1.  -0.412  CC(=O)Cl . CN
    """
    lines = [product]
    if not candidates:
        lines.append("  (no valid candidates)")
    for candidate in candidates:
        reactants = ' . '.join(candidate['reactants'])
        lines.append(f"  {candidate['rank']:>2}.  {candidate['score']:8.3f}  {reactants}")
    return '\n'.join(lines)


def format_ingest_stats(stats: Mapping) -> str:
    """Summary of an ingest run: counts, splits, center histogram and classes."""
    lines: List[str] = [
        f"Reactions: {stats['reactions']} ({stats['skipped']} lines skipped, "
        f"{stats['reagents_dropped']} reagents dropped, {stats['pairs_skipped']} without translation pairs)",
        "Splits: " + ', '.join(f"{name} {count}" for name, count in stats['splits'].items()),
        "Centers: " + ', '.join(f"{bucket}: {count}" for bucket, count in stats['centers'].items()),
        "Classes: " + ', '.join(
            f"{'unknown' if key == '0' else key}: {count}" for key, count in stats['classes'].items()
        ),
    ]
    return '\n'.join(lines)


def format_checkpoint(meta: Mapping) -> str:
    """Human summary of a checkpoint's metadata."""
    lines = [
        f"Module: {meta['module']}",
        f"Config hash: {meta['config_hash']}",
        "Model: " + ', '.join(f"{k}={v}" for k, v in sorted(meta['model'].items())),
        f"Atom vocabulary: {', '.join(meta['atom_vocab'])}",
        f"Tensors: {meta['tensors']} ({meta['values']} values)",
    ]
    if meta.get('new_atoms') is not None:
        lines.append(f"New-atom vocabulary: {meta['new_atoms']} entries")
    if meta.get('adam_step') is not None:
        lines.append(f"Adam step: {meta['adam_step']}")
    if meta.get('best_weights'):
        lines.append("Best-validation weights: stored separately")
    return '\n'.join(lines)
