"""
Result files: EvalReports as JSON lines, grids of reports as tab-delimited
tables and as a standalone HTML report.
"""

import csv
import html
import logging
import os
from datetime import datetime

import numpy as np

from evaluator import EvalReport
from utils import fingerprint

logger = logging.getLogger(__name__)

OVERALL = 'Overall'


def append_report(path, report):
    """Append one report as a JSON line; each record is flushed on its own."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'a') as file:
        file.write(report.model_dump_json() + '\n')
        file.flush()
        os.fsync(file.fileno())


def overall_report(reports, name=OVERALL):
    """
    Unweighted mean over tasks. When all tasks share the repetition count the
    per-run values are averaged per repetition, so the std is that of the
    per-repetition means; otherwise the task means are used.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    counts = {r.n_repetitions for r in reports}
    if len(counts) == 1:
        per_run = np.mean([r.per_run_auc for r in reports], axis=0).tolist()
    else:
        per_run = [r.auc_mean for r in reports]
    return EvalReport.from_runs(
        name, per_run, fingerprint([r.config_fingerprint for r in reports]),
        transform=reports[0].transform if len({r.transform for r in reports}) == 1 else 'mixed',
        encoder_id=reports[0].encoder_id,
        similarity=reports[0].similarity,
    )


def _cell(report):
    return f'{report.auc_mean:.4f}±{report.auc_std:.4f}' if report is not None else 'N/A'


def write_table(path, grid, row_label='target', config_fingerprint=''):
    """
    Tab-delimited grid of reports with an Overall column per row.

    :param grid: {row name: {column name: EvalReport}}
    """
    columns = []
    for cells in grid.values():
        columns.extend(c for c in cells if c not in columns)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as file:
        file.write(f'# config_fingerprint: {config_fingerprint}\n')
        writer = csv.writer(file, delimiter='\t')
        writer.writerow([row_label] + columns + [OVERALL])
        for row, cells in grid.items():
            present = [cells[c] for c in columns if c in cells]
            writer.writerow([row] + [_cell(cells.get(c)) for c in columns] + [_cell(overall_report(present))])
    logger.debug(f"Wrote table {path}")


def write_html_report(path, title, grid, meta=None, row_label='Target'):
    """Standalone HTML rendering of a report grid with Overall row and column."""
    columns = []
    for cells in grid.values():
        columns.extend(c for c in cells if c not in columns)
    now = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
    meta = meta or {}

    h = []
    h.append('<!DOCTYPE html>')
    h.append('<html><head><meta charset="utf-8">')
    h.append(f'<title>{html.escape(title)}</title>')
    h.append('<style>')
    h.append(
        '* { box-sizing: border-box; }\n'
        'body { font-family: "Segoe UI", system-ui, sans-serif; margin: 0;'
        ' padding: 24px 40px; background: #fafafa; color: #333; }\n'
        'h1 { margin-bottom: 4px; }\n'
        '.meta { color: #888; font-size: 0.9em; margin-bottom: 28px; }\n'
        'table { border-collapse: collapse; width: 100%; margin-bottom: 20px;'
        ' background: #fff; box-shadow: 0 1px 4px rgba(0,0,0,0.07);'
        ' border-radius: 8px; overflow: hidden; }\n'
        'th { background: #2d2d2d; color: #fff; padding: 12px 14px;'
        ' text-align: left; font-weight: 600; font-size: 0.88em; }\n'
        'td { padding: 10px 14px; border-bottom: 1px solid #f0f0f0;'
        ' font-size: 0.88em; }\n'
        'tr:last-child td { border-bottom: none; }\n'
        'tr:hover { background: #f8f9fa; }\n'
        '.high { color: #2e7d32; font-weight: 600; }\n'
        '.medium { color: #e65100; font-weight: 600; }\n'
        '.low { color: #c62828; font-weight: 600; }\n'
        '.avg-row td { font-weight: 700; background: #f5f5f5;'
        ' border-top: 2px solid #ddd; }\n'
        'td[title] { cursor: help; }\n'
    )
    h.append('</style></head><body>')
    h.append(f'<h1>{html.escape(title)}</h1>')
    details = ''.join(f' &middot; {html.escape(str(k))}: {html.escape(str(v))}' for k, v in meta.items())
    h.append(f'<p class="meta">{now}{details} &middot; {len(grid)} rows &middot; {len(columns)} columns</p>')

    h.append(f'<table>\n<tr><th>{html.escape(row_label)}</th>')
    for c in columns:
        h.append(f'<th>{html.escape(c)}</th>')
    h.append(f'<th>{OVERALL}</th></tr>')

    def td(report):
        if report is None:
            return '<td>N/A</td>'
        css = 'high' if report.auc_mean >= 0.95 else ('medium' if report.auc_mean >= 0.85 else 'low')
        runs = ', '.join(f'{v:.4f}' for v in report.per_run_auc)
        return f'<td class="{css}" title="{html.escape(runs)}">{_cell(report)}</td>'

    column_reports = {c: [] for c in columns}
    for row, cells in grid.items():
        h.append(f'<tr><td>{html.escape(str(row))}</td>')
        for c in columns:
            h.append(td(cells.get(c)))
            if c in cells:
                column_reports[c].append(cells[c])
        h.append(td(overall_report(list(cells.values()))))
        h.append('</tr>')

    # Overall row
    h.append(f'<tr class="avg-row"><td>{OVERALL}</td>')
    for c in columns:
        h.append(td(overall_report(column_reports[c])) if column_reports[c] else '<td>N/A</td>')
    everything = [r for reports in column_reports.values() for r in reports]
    h.append(td(overall_report(everything)) if everything else '<td>N/A</td>')
    h.append('</tr>\n</table>\n</body>\n</html>')

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as file:
        file.write('\n'.join(h))
    return path
