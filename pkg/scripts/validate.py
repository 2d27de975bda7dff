#!/usr/bin/env python3
"""
Corpus Manifest Validator
=========================

Validates corpus/manifest.json against data/schema.json, then cross-checks
the recorded ground truth against the reference hash oracles:

- every fixture binary exists and parses as an x86-64 executable
- recorded stdout is the hex digest of the manifest input under the
  fixture's weak algorithm (SHA-256 for baselines)
- rewritten_stdout is the SHA-256 hex digest of the same input
- weak routine entries and call sites lie inside executable code
- baseline references name baseline fixtures
- logic edits parse and their original bytes match the binary

Usage:
    python scripts/validate.py
    python scripts/validate.py --manifest corpus/manifest.json --schema data/schema.json
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List

import jsonschema

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from hashswap import refhash  # noqa: E402
from hashswap.elf import load  # noqa: E402
from hashswap.errors import HashswapError  # noqa: E402
from hashswap.rewrite import parse_changes  # noqa: E402

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class Validator:
    """Validates the fixture manifest and its ground truth."""

    def __init__(self):
        self.errors: List[str] = []
        self.warnings: List[str] = []

    def validate(self, manifest_file: str, schema_file: str) -> bool:
        """Run all validation checks."""
        logger.info(f"Validating {manifest_file} against {schema_file}")
        try:
            with open(manifest_file, 'r') as f:
                manifest = json.load(f)
            with open(schema_file, 'r') as f:
                schema = json.load(f)
        except Exception as e:
            self.errors.append(f"Failed to load files: {e}")
            self.print_results()
            return False

        if not self._validate_schema(manifest, schema):
            self.print_results()
            return False

        corpus = os.path.dirname(os.path.abspath(manifest_file))
        data = manifest['input'].encode()
        fixtures = manifest['fixtures']
        self._check_for_duplicates(fixtures)
        baselines = {f['name'] for f in fixtures if f['kind'] == 'baseline'}
        if not os.path.isfile(os.path.join(corpus, manifest['script'])):
            self.errors.append(f"Script {manifest['script']} not found")

        for fixture in fixtures:
            self._validate_fixture(fixture, corpus, data, baselines)

        self.print_results()
        return not self.errors

    def _validate_schema(self, manifest: Dict, schema: Dict) -> bool:
        """Validate the manifest against the JSON schema."""
        try:
            jsonschema.validate(instance=manifest, schema=schema)
            logger.info("Schema validation passed.")
            return True
        except jsonschema.exceptions.ValidationError as e:
            self.errors.append(f"Schema validation failed: {e.message} at {e.json_path}")
            return False

    def _expected(self, algorithm: str, data: bytes) -> str:
        return refhash.digest(algorithm, data).hex() + '\n'

    def _validate_fixture(self, fixture: Dict[str, Any], corpus: str, data: bytes, baselines: set):
        """Validate a single fixture entry."""
        prefix = f"Fixture {fixture['name']}"
        path = os.path.join(corpus, fixture['binary'])
        if not os.path.isfile(path):
            self.errors.append(f"{prefix}: binary {fixture['binary']} missing")
            return
        try:
            image = load(path)
        except HashswapError as e:
            self.errors.append(f"{prefix}: {e}")
            return

        main = int(fixture['main'], 16)
        if not image.is_code(main):
            self.errors.append(f"{prefix}: main {fixture['main']} is not in executable code")

        if fixture['kind'] == 'baseline':
            if fixture['stdout'] != self._expected(fixture['algorithm'], data):
                self.errors.append(f"{prefix}: stdout is not the {fixture['algorithm']} digest of the input")

        routines = fixture.get('weak_routines', [])
        if fixture['kind'] in ('library', 'variant', 'printer') and not routines:
            self.errors.append(f"{prefix}: no weak routine recorded")
        for routine in routines:
            self._validate_routine(routine, image, prefix)
        if routines:
            if fixture['stdout'] != self._expected(routines[0]['algorithm'], data):
                self.errors.append(f"{prefix}: stdout is not the {routines[0]['algorithm']} digest of the input")
            if fixture.get('rewritten_stdout') != self._expected('SHA-256', data):
                self.errors.append(f"{prefix}: rewritten_stdout is not the SHA-256 digest of the input")
            if fixture.get('baseline') not in baselines:
                self.errors.append(f"{prefix}: baseline {fixture.get('baseline')!r} is not a baseline fixture")
            if not fixture.get('changes'):
                self.warnings.append(f"{prefix}: no logic edits recorded")

        if fixture.get('changes'):
            self._validate_changes(fixture['changes'], image, prefix)
        for hit in fixture.get('detected', []):
            if image.file_offset(int(hit['vaddr'], 16)) is None:
                self.errors.append(f"{prefix}: detected constant {hit['vaddr']} is outside the file")
        for orphan in fixture.get('orphans', []):
            if image.file_offset(int(orphan, 16)) is None:
                self.errors.append(f"{prefix}: orphan constant {orphan} is outside the file")

    def _validate_routine(self, routine: Dict[str, Any], image, prefix: str):
        entry = int(routine['entry'], 16)
        if not image.is_code(entry):
            self.errors.append(f"{prefix}: {routine['symbol']} entry {routine['entry']} is not in executable code")
        expected_size = len(refhash.digest(routine['algorithm'], b''))
        if routine['digest_size'] != expected_size:
            self.errors.append(f"{prefix}: {routine['algorithm']} digest size should be {expected_size}")
        for site in routine['call_sites']:
            if not image.is_code(int(site, 16)):
                self.errors.append(f"{prefix}: call site {site} is not in executable code")

    def _validate_changes(self, changes: List[str], image, prefix: str):
        try:
            edits = parse_changes('\n'.join(changes), prefix)
        except HashswapError as e:
            self.errors.append(str(e))
            return
        for edit in edits:
            try:
                actual = image.read(edit.vaddr, len(edit.original))
            except HashswapError as e:
                self.errors.append(f"{prefix}: {e}")
                continue
            if actual != edit.original:
                self.errors.append(f"{prefix}: logic edit at {edit.vaddr:x} expects {edit.original.hex()}, "
                                   f"binary holds {actual.hex()}")

    def _check_for_duplicates(self, fixtures: List[Dict]):
        """Check for duplicate fixture names and binaries."""
        names = set()
        binaries = set()
        for i, fixture in enumerate(fixtures):
            if fixture['name'] in names:
                self.errors.append(f"Duplicate fixture name '{fixture['name']}' at index {i}")
            names.add(fixture['name'])
            if fixture['binary'] in binaries:
                self.errors.append(f"Duplicate binary '{fixture['binary']}' at index {i}")
            binaries.add(fixture['binary'])

    def print_results(self):
        """Print validation errors and warnings."""
        logger.info("Validation results:")
        if self.errors:
            logger.error("Errors found:")
            for error in self.errors:
                logger.error(f"- {error}")
        if self.warnings:
            logger.warning("Warnings found:")
            for warning in self.warnings:
                logger.warning(f"- {warning}")
        if not self.errors and not self.warnings:
            logger.info("All validation checks passed.")


def main():
    """Main entry point."""
    parser = argparse.ArgumentParser(
        description='Validate the fixture manifest and its ground truth.',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    parser.add_argument('--manifest', default='corpus/manifest.json', help='Path to the manifest')
    parser.add_argument('--schema', default='data/schema.json', help='Path to the schema file')
    args = parser.parse_args()

    validator = Validator()
    if not validator.validate(args.manifest, args.schema):
        logger.error("Validation failed.")
        sys.exit(1)
    logger.info("Validation successful.")


if __name__ == '__main__':
    main()
