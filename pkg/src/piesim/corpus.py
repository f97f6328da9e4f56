"""Builtin scenario corpus: every argument of the security analysis as an
executable check, plus one benign end-to-end walk.

Attack scenarios must end in a defended outcome (a denied operation, a
rejected attestation, or a detected attack); benign scenarios must pass
cleanly. Addresses follow one convention throughout: the monitor owns the
first 2 MiB of DRAM, enclaves sit at 0x8020_0000 + i * 0x10_0000, shared
regions at 0x8700_0000 + i * 0x1000.
"""

from __future__ import annotations

from .harness import Scenario

_ENC = [hex(0x8020_0000 + i * 0x10_0000) for i in range(16)]
_REG = [hex(0x8700_0000 + i * 0x1000) for i in range(16)]
_PAGE = 0x1000
_ESZ = 0x10000

_SENSOR = {"name": "t0", "kind": "sensor", "mmio": "spi0",
           "manufacturer": "acme", "firmware_version": "1.0"}


def _s(name, platform, actions, assertions, seed=1) -> dict:
    return {"name": name, "seed": seed, "platform": platform,
            "actions": actions, "assertions": assertions}


def _corpus_docs() -> list[dict]:
    docs = []

    # Benign end-to-end: controller attests its sensor, an application reads
    # a signed sample through it, and the platform attestation verifies.
    docs.append(_s(
        "sunny-day-sensor-path",
        {"peripherals": [_SENSOR]},
        [
            {"op": "os.create_enclave", "name": "CE1", "kind": "ce",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.connect", "a": "CE1", "b": "t0", "node": "spi0",
             "as": "Rp"},
            {"op": "os.connect", "a": "A", "b": "CE1", "base": _REG[0],
             "size": _PAGE, "as": "Ra"},
            {"op": "env.set_sensor", "peripheral": "t0", "value": 25},
            {"op": "os.schedule", "target": "CE1"},
            {"op": "ae.call", "ae": "A", "ce": "CE1", "payload": "0x01"},
            {"op": "verifier.attest", "ae": "A"},
        ],
        [
            {"assert": "expect_error", "action": 6, "error": None},
            {"assert": "expect_verdict", "accept": True},
        ]))

    # The OS reads an enclave's private memory and must take an access fault.
    docs.append(_s(
        "malicious-os-read",
        {},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ, "code": "super-secret-code"},
            {"op": "os.read", "base": _ENC[0], "len": 16},
        ],
        [
            {"assert": "expect_error", "action": 1, "error": "AccessFault"},
        ]))

    # A connect whose range cuts into live private memory must be refused.
    docs.append(_s(
        "overlap-connect",
        {},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "B", "kind": "ce",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.connect", "a": "A", "b": "B",
             "base": hex(0x8020_8000), "size": _PAGE},
        ],
        [
            {"assert": "expect_error", "action": 2, "error": "OverlapError"},
        ]))

    # A range can be shared by exactly two parties; a third connect over the
    # same range must fail.
    docs.append(_s(
        "third-party-connect",
        {},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "B", "kind": "ce",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.create_enclave", "name": "C", "kind": "ae",
             "base": _ENC[2], "size": _ESZ},
            {"op": "os.connect", "a": "A", "b": "B", "base": _REG[0],
             "size": _PAGE, "as": "R1"},
            {"op": "os.connect", "a": "C", "b": "B", "base": _REG[0],
             "size": _PAGE},
        ],
        [
            {"assert": "expect_error", "action": 4, "error": "ThirdParty"},
        ]))

    # After a peer dies the stale buffer stays unreadable until the OS issues
    # the synchronous disconnect, after which it reads back as zeros.
    docs.append(_s(
        "stale-buffer",
        {},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "B", "kind": "ce",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.connect", "a": "A", "b": "B", "base": _REG[0],
             "size": _PAGE, "as": "R1"},
            {"op": "os.destroy_enclave", "target": "B"},
            {"op": "os.read", "base": _REG[0], "len": 32},
            {"op": "os.sync_disconnect", "region": "R1"},
            {"op": "os.read", "base": _REG[0], "len": 32},
        ],
        [
            {"assert": "expect_error", "action": 4, "error": "AccessFault"},
            {"assert": "expect_error", "action": 6, "error": None},
            {"assert": "expect_bytes", "base": _REG[0], "len": 32,
             "value": 0},
        ]))

    # A survivor of an asynchronous disconnect cannot be connected again
    # before it has received the synchronous disconnect.
    docs.append(_s(
        "connect-before-sync-disconnect",
        {},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "B", "kind": "ce",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.create_enclave", "name": "C", "kind": "ce",
             "base": _ENC[2], "size": _ESZ},
            {"op": "os.connect", "a": "A", "b": "B", "base": _REG[0],
             "size": _PAGE, "as": "R1"},
            {"op": "os.destroy_enclave", "target": "B"},
            {"op": "os.connect", "a": "A", "b": "C", "base": _REG[1],
             "size": _PAGE},
            {"op": "os.sync_disconnect", "region": "R1"},
            {"op": "os.connect", "a": "A", "b": "C", "base": _REG[1],
             "size": _PAGE},
            {"op": "os.schedule", "target": "A"},
            {"op": "os.connect", "a": "A", "b": "C", "base": _REG[1],
             "size": _PAGE},
        ],
        [
            {"assert": "expect_error", "action": 5,
             "error": "MustSyncDisconnectFirst"},
            {"assert": "expect_error", "action": 7,
             "error": "MustSyncDisconnectFirst"},
            {"assert": "expect_error", "action": 9, "error": None},
        ]))

    # Destroying an enclave zero-fills its private memory; once the entry is
    # gone the OS reads zeros where the image used to be.
    docs.append(_s(
        "flush-on-destroy",
        {},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ, "code": "do-not-leak-me"},
            {"op": "os.destroy_enclave", "target": "A"},
            {"op": "os.read", "base": _ENC[0], "len": 64},
        ],
        [
            {"assert": "expect_error", "action": 2, "error": None},
            {"assert": "expect_bytes", "base": _ENC[0], "len": 64,
             "value": 0},
        ]))

    # A lying DMA peripheral reports a different window than the OS claims;
    # the monitor's verification must refuse the bind.
    docs.append(_s(
        "rogue-dma",
        {"peripherals": [{"name": "acc0", "kind": "accelerator",
                          "manufacturer": "acme", "firmware_version": "2.0"}]},
        [
            {"op": "os.create_enclave", "name": "CE1", "kind": "ce",
             "base": _ENC[0], "size": _ESZ},
            {"op": "periph.lie_dma", "peripheral": "acc0",
             "base": _REG[8], "size": _PAGE},
            {"op": "os.connect", "a": "CE1", "b": "acc0", "base": _REG[0],
             "size": _PAGE},
        ],
        [
            {"assert": "expect_error", "action": 2, "error": "Mismatch"},
            {"assert": "expect_attack_detected"},
            {"assert": "expect_trace_absent",
             "pattern": "\"op\":\"connect_enclaves\""},
        ]))

    # Entry budget: 16 entries carry the monitor, the OS background entry,
    # and seven enclave+region pairs; the eighth enclave must not fit.
    budget_actions = []
    for i in range(7):
        budget_actions.append(
            {"op": "os.create_enclave", "name": f"CE{i}", "kind": "ce",
             "base": _ENC[i], "size": _ESZ})
        budget_actions.append(
            {"op": "os.connect", "a": f"CE{i}", "b": f"t{i}",
             "node": f"spi{i}"})
    budget_actions.append(
        {"op": "os.create_enclave", "name": "E8", "kind": "ae",
         "base": _ENC[8], "size": _ESZ})
    docs.append(_s(
        "pmp-budget",
        {"max_entries": 16,
         "peripherals": [
             {"name": f"t{i}", "kind": "sensor", "mmio": f"spi{i}",
              "manufacturer": "acme", "firmware_version": "1.0"}
             for i in range(7)]},
        budget_actions,
        [{"assert": "expect_error", "action": i, "error": None}
         for i in range(14)]
        + [{"assert": "expect_error", "action": 14, "error": "NoFreeEntry"}]))

    # Identifier reuse: the adversary relaunches both ends under recycled
    # identifiers after the verifier attested; provisioning the secret to the
    # impostor fails, which is the detection.
    docs.append(_s(
        "toctou-identifier-reuse",
        {"identifier_policy": "reuse"},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ, "code": "app-a"},
            {"op": "os.create_enclave", "name": "B", "kind": "ce",
             "base": _ENC[1], "size": _ESZ, "code": "ctrl-b"},
            {"op": "os.connect", "a": "A", "b": "B", "base": _REG[0],
             "size": _PAGE, "as": "R1"},
            {"op": "verifier.attest", "ae": "A",
             "policy": {"ae": "A", "ces": ["B"]}},
            {"op": "os.destroy_enclave", "target": "B"},
            {"op": "os.create_enclave", "name": "Bp", "kind": "ce",
             "base": _ENC[2], "size": _ESZ, "code": "ctrl-b"},
            {"op": "os.connect", "a": "A", "b": "Bp", "base": _REG[1],
             "size": _PAGE},
            {"op": "os.sync_disconnect", "region": "R1"},
            {"op": "adversary.relaunch_with_same_id", "target": "A",
             "name": "Astar", "code": "evil-a"},
            {"op": "os.connect", "a": "Astar", "b": "Bp", "base": _REG[1],
             "size": _PAGE},
            {"op": "verifier.provision_secret", "ae": "A"},
        ],
        [
            {"assert": "expect_verdict", "accept": True},
            {"assert": "expect_error", "action": 6,
             "error": "MustSyncDisconnectFirst"},
            {"assert": "expect_error", "action": 9, "error": None},
            {"assert": "expect_attack_detected"},
        ]))

    # The OS disconnects the pair while the verifier walks the graph; the
    # controller report no longer lists the application, and the cross-check
    # catches the inconsistent links.
    docs.append(_s(
        "link-mismatch-attestation",
        {},
        [
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "B", "kind": "ce",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.connect", "a": "A", "b": "B", "base": _REG[0],
             "size": _PAGE, "as": "R1"},
            {"op": "verifier.attest", "ae": "A",
             "policy": {"ae": "A", "ces": ["B"]},
             "between": [{"op": "os.sync_disconnect", "region": "R1"}]},
        ],
        [
            {"assert": "expect_verdict", "reject": "LinkMismatch"},
            {"assert": "expect_attack_detected"},
        ]))

    # A peripheral with a certificate from no known manufacturer: the
    # controller refuses service and the platform attestation rejects.
    docs.append(_s(
        "forged-peripheral-cert",
        {"peripherals": [{"name": "t0", "kind": "sensor", "mmio": "spi0",
                          "manufacturer": "acme", "firmware_version": "1.0",
                          "certified": False}]},
        [
            {"op": "os.create_enclave", "name": "CE1", "kind": "ce",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "A", "kind": "ae",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.connect", "a": "CE1", "b": "t0", "node": "spi0"},
            {"op": "os.connect", "a": "A", "b": "CE1", "base": _REG[0],
             "size": _PAGE},
            {"op": "os.schedule", "target": "CE1"},
            {"op": "ae.call", "ae": "A", "ce": "CE1", "payload": "0x01"},
            {"op": "verifier.attest", "ae": "A",
             "policy": {"ae": "A", "ces": ["CE1"]}},
        ],
        [
            {"assert": "expect_error", "action": 5, "error": "NotAttested"},
            {"assert": "expect_verdict", "reject": "PeripheralCertInvalid"},
            {"assert": "expect_attack_detected"},
        ]))

    # Controller death cascades: survivors keep sole ownership until the OS
    # frees the regions, the peripheral resets on zeroization, and later
    # calls observe the disconnect.
    docs.append(_s(
        "ce-killed-cascade",
        {"peripherals": [_SENSOR]},
        [
            {"op": "os.create_enclave", "name": "CE1", "kind": "ce",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "A1", "kind": "ae",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.create_enclave", "name": "A2", "kind": "ae",
             "base": _ENC[2], "size": _ESZ},
            {"op": "os.connect", "a": "CE1", "b": "t0", "node": "spi0",
             "as": "Rp"},
            {"op": "os.connect", "a": "A1", "b": "CE1", "base": _REG[0],
             "size": _PAGE, "as": "R1"},
            {"op": "os.connect", "a": "A2", "b": "CE1", "base": _REG[1],
             "size": _PAGE, "as": "R2"},
            {"op": "os.schedule", "target": "CE1"},
            {"op": "ae.call", "ae": "A1", "ce": "CE1", "payload": "0x01"},
            {"op": "os.destroy_enclave", "target": "CE1"},
            {"op": "os.read", "base": _REG[0], "len": 16},
            {"op": "os.sync_disconnect", "region": "R1"},
            {"op": "os.sync_disconnect", "region": "R2"},
            {"op": "os.sync_disconnect", "region": "Rp"},
        ],
        [
            {"assert": "expect_error", "action": 7, "error": None},
            {"assert": "expect_error", "action": 9, "error": "AccessFault"},
            {"assert": "expect_error", "action": 10, "error": None},
            {"assert": "expect_bytes", "base": _REG[0], "len": 16,
             "value": 0},
            {"assert": "expect_bytes", "base": _REG[1], "len": 16,
             "value": 0},
        ]))

    # Replug tears down every session behind the controller; service resumes
    # only after a fresh connect and local attestation.
    docs.append(_s(
        "peripheral-replug-cascade",
        {"peripherals": [_SENSOR]},
        [
            {"op": "os.create_enclave", "name": "CE1", "kind": "ce",
             "base": _ENC[0], "size": _ESZ},
            {"op": "os.create_enclave", "name": "A1", "kind": "ae",
             "base": _ENC[1], "size": _ESZ},
            {"op": "os.create_enclave", "name": "A2", "kind": "ae",
             "base": _ENC[2], "size": _ESZ},
            {"op": "os.connect", "a": "CE1", "b": "t0", "node": "spi0",
             "as": "Rp"},
            {"op": "os.connect", "a": "A1", "b": "CE1", "base": _REG[0],
             "size": _PAGE, "as": "R1"},
            {"op": "os.connect", "a": "A2", "b": "CE1", "base": _REG[1],
             "size": _PAGE, "as": "R2"},
            {"op": "os.schedule", "target": "CE1"},
            {"op": "ae.call", "ae": "A1", "ce": "CE1", "payload": "0x01"},
            {"op": "env.replug", "peripheral": "t0"},
            {"op": "os.schedule", "target": "CE1"},
            {"op": "ae.call", "ae": "A1", "ce": "CE1", "payload": "0x01"},
            {"op": "os.sync_disconnect", "region": "Rp"},
            {"op": "os.schedule", "target": "CE1"},
            {"op": "os.connect", "a": "CE1", "b": "t0", "node": "spi0",
             "as": "Rp2"},
            {"op": "os.schedule", "target": "CE1"},
            {"op": "ae.call", "ae": "A1", "ce": "CE1", "payload": "0x01"},
        ],
        [
            {"assert": "expect_error", "action": 7, "error": None},
            {"assert": "expect_error", "action": 10, "error": "NotAttested"},
            {"assert": "expect_error", "action": 15, "error": None},
        ]))

    return docs


def builtin_corpus() -> list[Scenario]:
    """The scenario suite encoding the security analysis, benign cases
    included."""
    return [Scenario.from_dict(doc) for doc in _corpus_docs()]
