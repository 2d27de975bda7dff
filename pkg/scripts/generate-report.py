#!/usr/bin/env python3
"""
Corpus Report Generator
=======================

Turns the JSON written by corpus-harness.py into a markdown report: pass
rates, per-category change counts, size and instruction overheads per
fixture, and the time spent in each phase.
"""

import argparse
import json
import sys
from collections import defaultdict
from datetime import datetime
from typing import Any, Dict, List

SIZE_LIMIT = 13 * 1024
INJECTED_LIMIT = 4 * 1024
RATIO_LIMIT = 1.05
PHASES = ('identify', 'scope', 'rewrite', 'verify')


class CorpusReportGenerator:
    """Generate a markdown report from harness results."""

    def __init__(self):
        self.report_lines: List[str] = []

    def generate_report(self, results: Dict[str, Any]) -> str:
        self.report_lines = []
        self._add_header(results)

        completed = [r for r in results.get('results', []) if 'counts' in r]
        self._add_summary(results, completed)
        if completed:
            self._add_categories(completed)
            self._add_overheads(completed)
            self._add_timings(results.get('results', []))
        self._add_failures(results.get('results', []))
        self._add_footer()
        return '\n'.join(self.report_lines) + '\n'

    def _add_header(self, results: Dict[str, Any]):
        self.report_lines.extend([
            "# hashswap Corpus Report",
            "",
            f"**Generated:** {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
            f"**Harness Version:** {results.get('harness_version', 'unknown')}",
            f"**Test Input:** `{results.get('input', '')}`",
            "",
        ])

    def _add_summary(self, results: Dict[str, Any], completed: List[Dict[str, Any]]):
        all_results = results.get('results', [])
        identified = sum(1 for r in all_results if r.get('identified'))
        false_positives = sum(r.get('false_positives', 0) for r in all_results)
        self.report_lines.extend([
            "## Summary",
            "",
            f"- **Fixtures:** {len(all_results)}",
            f"- **Passed:** {results.get('passed', 0)}",
            f"- **Identified:** {identified}",
            f"- **False Positives:** {false_positives}",
            f"- **Rewritten:** {len(completed)}",
            "",
        ])

    def _add_categories(self, completed: List[Dict[str, Any]]):
        totals = defaultdict(int)
        by_algorithm: Dict[str, Dict[str, int]] = defaultdict(lambda: defaultdict(int))
        for result in completed:
            for category in ('routine', 'buffer', 'logic'):
                totals[category] += result['counts'][category]
                by_algorithm[result['algorithm']][category] += result['counts'][category]
        grand = sum(totals.values()) or 1

        self.report_lines.extend([
            "## Changes by Category",
            "",
            "| Algorithm | Routine | Buffer | Logic |",
            "|-----------|---------|--------|-------|",
        ])
        for algorithm in sorted(by_algorithm):
            counts = by_algorithm[algorithm]
            self.report_lines.append(f"| {algorithm} | {counts['routine']} | {counts['buffer']} | {counts['logic']} |")
        self.report_lines.extend([
            f"| **Total** | {totals['routine']} | {totals['buffer']} | {totals['logic']} |",
            "",
            f"Automated share: {(totals['routine'] + totals['buffer']) / grand:.1%}",
            "",
        ])

    def _add_overheads(self, completed: List[Dict[str, Any]]):
        self.report_lines.extend([
            "## Overheads",
            "",
            "| Fixture | Original | Added | Injected | Instructions | Baseline | Overhead | Ratio | Status |",
            "|---------|----------|-------|----------|--------------|----------|----------|-------|--------|",
        ])
        overheads = []
        for result in completed:
            sizes = result['sizes']
            counts = result.get('instructions')
            if counts is None:
                continue
            overheads.append(counts['overhead'])
            within = (sizes['added'] <= SIZE_LIMIT and sizes['injected_code'] <= INJECTED_LIMIT
                      and counts['ratio'] <= RATIO_LIMIT)
            status = self._get_status_emoji(result['ok'], within)
            self.report_lines.append(
                f"| {result['name']} | {sizes['original']} | {sizes['added']} | {sizes['injected_code']} "
                f"| {counts['rewritten']} | {counts['baseline']} | {counts['overhead']:+d} "
                f"| {counts['ratio']:.4f} | {status} |"
            )
        if overheads:
            self.report_lines.extend([
                "",
                f"Mean instruction overhead: {sum(overheads) / len(overheads):+.0f}",
            ])
        self.report_lines.append("")

    def _add_timings(self, all_results: List[Dict[str, Any]]):
        totals = {phase: sum(r.get('timings', {}).get(phase, 0.0) for r in all_results) for phase in PHASES}
        overall = sum(totals.values()) or 1.0
        self.report_lines.extend([
            "## Phase Timings",
            "",
            "| Phase | Seconds | Share |",
            "|-------|---------|-------|",
        ])
        for phase in PHASES:
            self.report_lines.append(f"| {phase} | {totals[phase]:.1f} | {totals[phase] / overall:.1%} |")
        self.report_lines.append("")

    def _add_failures(self, all_results: List[Dict[str, Any]]):
        failures = [r for r in all_results if not r.get('ok')]
        if not failures:
            return
        self.report_lines.extend(["## Failures", ""])
        for result in failures:
            self.report_lines.append(f"- ❌ **{result['name']}:** {result.get('error', 'unknown error')}")
        self.report_lines.append("")

    def _add_footer(self):
        self.report_lines.extend([
            "---",
            "",
            "*This report was automatically generated from corpus-harness.py results.*",
            "",
            "**Legend:**",
            f"- ✅ Output matches and all overheads within limits "
            f"(added ≤ {SIZE_LIMIT} bytes, injected ≤ {INJECTED_LIMIT} bytes, ratio ≤ {RATIO_LIMIT})",
            "- ⚠️ Output matches but an overhead limit is exceeded",
            "- ❌ Output mismatch",
        ])

    def _get_status_emoji(self, ok: bool, within: bool) -> str:
        if not ok:
            return '❌'
        return '✅' if within else '⚠️'


def main():
    """Main entry point."""
    parser = argparse.ArgumentParser(description='Generate a markdown report from corpus harness results')
    parser.add_argument('--results', required=True, help='JSON file written by corpus-harness.py')
    parser.add_argument('--output', required=True, help='Output markdown file for the report')
    args = parser.parse_args()

    try:
        with open(args.results, 'r') as f:
            results = json.load(f)
    except Exception as e:
        print(f"Error loading results: {e}", file=sys.stderr)
        sys.exit(1)

    report = CorpusReportGenerator().generate_report(results)

    try:
        with open(args.output, 'w') as f:
            f.write(report)
        print(f"Corpus report generated: {args.output}")
    except Exception as e:
        print(f"Error saving report: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
