"""Command-line entry points.

    piesim run <scenario.json> [--seed N] [--trace-out PATH] [--max-entries {8,16}]
    piesim corpus [--trace-dir DIR]
    piesim attest-dump <report-file> (hex, base64, or raw bytes)
    piesim keygen --seed SEED

Exit codes: 0 all assertions pass, 1 assertion failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import json
import sys
from pathlib import Path

from .attestation import AttestationReport
from .corpus import builtin_corpus
from .crypto import HashProvider
from .errors import ParseError, ScenarioInvalid
from .harness import RunResult, Scenario, run_scenario


def _print_result(result: RunResult) -> None:
    for res in result.assertion_results:
        status = "PASS" if res.passed else "FAIL"
        print(f"  [{status}] {json.dumps(res.assertion, sort_keys=True)}"
              + ("" if res.passed else f"  ({res.detail})"))
    print(f"{result.scenario}: "
          + ("all assertions passed" if result.passed else "ASSERTIONS FAILED"))


def _cmd_run(args) -> int:
    try:
        scenario = Scenario.from_json(Path(args.scenario).read_text())
        result = run_scenario(scenario, seed=args.seed,
                              max_entries=args.max_entries)
    except (ScenarioInvalid, OSError) as exc:
        print(f"scenario invalid: {exc}", file=sys.stderr)
        return 2
    if args.trace_out:
        Path(args.trace_out).write_text(result.trace.to_jsonl())
    _print_result(result)
    return 0 if result.passed else 1


def _cmd_corpus(args) -> int:
    failures = 0
    for scenario in builtin_corpus():
        result = run_scenario(scenario)
        if args.trace_dir:
            out = Path(args.trace_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{scenario.name}.jsonl").write_text(
                result.trace.to_jsonl())
        status = "PASS" if result.passed else "FAIL"
        print(f"[{status}] {scenario.name}")
        if not result.passed:
            failures += 1
            for res in result.assertion_results:
                if not res.passed:
                    print(f"    failed: {json.dumps(res.assertion)} "
                          f"({res.detail})")
    print(f"{failures} failing scenario(s)" if failures
          else "corpus: all scenarios passed")
    return 1 if failures else 0


def _decode_report_file(raw: bytes) -> bytes:
    text = raw.strip()
    try:
        return bytes.fromhex(text.decode())
    except (UnicodeDecodeError, ValueError):
        pass
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError):
        pass
    return raw


def _cmd_attest_dump(args) -> int:
    try:
        data = _decode_report_file(Path(args.report).read_bytes())
        report = AttestationReport.from_bytes(data)
    except (OSError, ParseError, ValueError) as exc:
        print(f"cannot parse report: {exc}", file=sys.stderr)
        return 2
    provider = HashProvider(0)
    fields = {
        "subject_id": str(report.subject_id),
        "subject_kind": report.subject_kind.name,
        "sm_measurement": report.sm_measurement.hex(),
        "subject_measurement": report.subject_measurement.hex(),
        "config_digest": report.config_digest.hex(),
        "connected_ids": [str(i) for i in report.connected_ids],
        "peripheral_evidence": None if report.peripheral_evidence is None
        else [{"firmware_version": e.certificate.firmware_version,
               "peripheral_key": e.certificate.peripheral_public_key.hex(),
               "challenge": e.challenge.hex()}
              for e in report.peripheral_evidence],
        "verifier_nonce": report.verifier_nonce.hex(),
        "platform_public_key": report.platform_public_key.hex(),
        "signature_ok": provider.verify(report.platform_public_key,
                                        report.signed_body(),
                                        report.platform_signature),
    }
    print(json.dumps(fields, indent=2))
    return 0 if fields["signature_ok"] else 1


def _cmd_keygen(args) -> int:
    provider = HashProvider(0)
    pair = provider.keygen(args.seed.encode())
    print(json.dumps({"public": pair.public.hex(),
                      "secret": pair.secret.hex()}, indent=2))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="piesim",
        description="platform isolation environment simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario file")
    run_p.add_argument("scenario")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--trace-out", default=None)
    run_p.add_argument("--max-entries", type=int, choices=(8, 16),
                       default=None)
    run_p.set_defaults(func=_cmd_run)

    corpus_p = sub.add_parser("corpus", help="run the builtin scenario suite")
    corpus_p.add_argument("--trace-dir", default=None)
    corpus_p.set_defaults(func=_cmd_corpus)

    dump_p = sub.add_parser("attest-dump",
                            help="decode and check a report file")
    dump_p.add_argument("report")
    dump_p.set_defaults(func=_cmd_attest_dump)

    keygen_p = sub.add_parser("keygen", help="derive a keypair from a seed")
    keygen_p.add_argument("--seed", required=True)
    keygen_p.set_defaults(func=_cmd_keygen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
