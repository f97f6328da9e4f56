"""Scenario runner and adversarial corpus.

A scenario is data: a platform description, an ordered action list, and
assertions evaluated against the trace after the run. Entities are referred
to by symbolic names resolved at run time, so the corpus stays reviewable
and diffable as JSON.

Actions (one monitor/runtime operation or environment injection each):

    os.create_enclave   {name, kind: "ae"|"ce", base, size, code?, config?}
    os.destroy_enclave  {target}
    os.connect          {a, b, base+size | node, as?}
    os.sync_disconnect  {region}
    os.read             {base, len}
    os.write            {base, data (hex)}
    os.schedule         {target}
    env.set_sensor      {peripheral, value}
    env.inject_key      {peripheral, key}
    env.unplug          {peripheral}
    env.replug          {peripheral, firmware_version?, certified?}
    periph.lie_dma      {peripheral, base, size}
    verifier.attest     {ae, policy?, between?: [actions]}
    verifier.provision_secret {ae}
    ae.call             {ae, ce, payload (hex or text)}
    adversary.relaunch_with_same_id {target, name, code?}

Assertions:

    expect_error          {action: index, error: kind-or-null}
    expect_verdict        {accept: true} | {reject: reason}
    expect_trace_absent   {pattern: regex over trace JSON lines}
    expect_bytes          {base, len, value: byte}
    expect_attack_detected {}

Connects involving a DMA peripheral run the negotiation and the monitor's
DMA verification first; a mismatch aborts the bind and records "Mismatch"
as the action's error. A non-OK reply to ``ae.call`` is recorded as that
action's error (NotAttested, NoSession, DriverError).

Base addresses in scenario files are hex strings or integers. Exit codes of
the CLI wrapper: 0 all assertions pass, 1 assertion failure, 2 invalid
scenario.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .attestation import (
    Measurement,
    VerificationPolicy,
    Verdict,
    attest_enclave,
    measure,
    verify_platform,
)
from .crypto import HashProvider, sha256
from .entities import OS, EntityId, EntityKind
from .errors import ScenarioInvalid, SimError, UnknownEnclave
from .monitor import (
    DmaVerdict,
    EnclaveKind,
    IdentifierPolicy,
    SecurityMonitor,
)
from .peripherals import DmaBinding, MmioBinding, PeripheralKind, build_peripheral
from .platform import MemRange, load_device_tree
from .progmodel import ControllerRuntime, ReplyStatus, ae_call
from .trace import TraceLog

DEFAULT_DEVICE_TREE = {
    "nodes": [
        {"name": "cpu0", "kind": "cpu", "base": "0x01000000",
         "size": 0x1000, "model": "rv64gc"},
        {"name": "dram", "kind": "dram", "base": "0x80000000",
         "size": 128 * 1024 * 1024, "model": "ddr4"},
    ] + [
        {"name": f"spi{i}", "kind": "bus-controller",
         "base": hex(0x1001_0000 + i * 0x1000), "size": 0x1000,
         "model": "spi-ctrl"}
        for i in range(8)
    ]
}

_KINDS = {"sensor": PeripheralKind.SENSOR,
          "keyboard": PeripheralKind.KEYBOARD,
          "accelerator": PeripheralKind.ACCELERATOR}

_ACTIONS = frozenset({
    "os.create_enclave", "os.destroy_enclave", "os.connect",
    "os.sync_disconnect", "os.read", "os.write", "os.schedule",
    "env.set_sensor", "env.inject_key", "env.unplug", "env.replug",
    "periph.lie_dma", "verifier.attest", "verifier.provision_secret",
    "ae.call", "adversary.relaunch_with_same_id",
})

_ASSERTS = frozenset({
    "expect_error", "expect_verdict", "expect_trace_absent", "expect_bytes",
    "expect_attack_detected",
})


def _addr(value) -> int:
    if isinstance(value, int):
        return value
    return int(value, 16)


@dataclass
class Scenario:
    name: str
    seed: int
    platform: dict
    actions: list[dict]
    assertions: list[dict]

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed,
                "platform": self.platform, "actions": self.actions,
                "assertions": self.assertions}

    @staticmethod
    def from_dict(doc: dict) -> "Scenario":
        try:
            return Scenario(doc["name"], int(doc.get("seed", 0)),
                            doc.get("platform", {}),
                            list(doc.get("actions", [])),
                            list(doc.get("assertions", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalid(f"bad scenario document: {exc}") from exc

    @staticmethod
    def from_json(text: str) -> "Scenario":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioInvalid(f"scenario is not valid JSON: {exc}") from exc
        return Scenario.from_dict(doc)


@dataclass
class AssertionResult:
    assertion: dict
    passed: bool
    detail: str = ""


@dataclass
class RunResult:
    scenario: str
    trace: TraceLog
    assertion_results: list[AssertionResult]
    errors: dict[int, str]
    last_reports: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.assertion_results)


def validate_scenario(scenario: Scenario) -> None:
    for i, action in enumerate(scenario.actions):
        op = action.get("op")
        if op not in _ACTIONS:
            raise ScenarioInvalid(f"action {i}: unknown op {op!r}")
    for i, assertion in enumerate(scenario.assertions):
        if assertion.get("assert") not in _ASSERTS:
            raise ScenarioInvalid(
                f"assertion {i}: unknown kind {assertion.get('assert')!r}")


class RemoteVerifier:
    """Verifier-side state: nonces, policies, and established secrets.

    An accepted attestation derives a shared secret by folding a fresh
    ephemeral value and the report nonce into the hash, and the monitor
    binds it to the attested live instance. A later relaunch under the same
    identifier cannot know it, which is what secret provisioning detects.
    """

    def __init__(self, monitor: SecurityMonitor, seed):
        self.monitor = monitor
        self.provider = HashProvider(b"verifier:" + str(seed).encode())
        self.secrets: dict[int, bytes] = {}

    def attest(self, ae: EntityId, policy: VerificationPolicy,
               between=None) -> tuple[Verdict, list]:
        """Three-step flow: application report, then one report per listed
        controller. ``between`` runs after the first fetch, modeling OS
        interference while the verifier walks the graph."""
        nonce = self.provider.random(32)
        ae_report = attest_enclave(self.monitor, ae, nonce)
        nonces = {ae: nonce}
        if between is not None:
            between()
        reports = [ae_report]
        for peer in ae_report.connected_ids:
            if peer.kind is not EntityKind.ENCLAVE:
                continue
            peer_nonce = self.provider.random(32)
            nonces[peer] = peer_nonce
            try:
                reports.append(attest_enclave(self.monitor, peer, peer_nonce))
            except UnknownEnclave:
                pass  # missing report surfaces as a link mismatch
        verdict = verify_platform(self.monitor.provider, reports, policy,
                                  nonces)
        if verdict.accepted:
            ephemeral = self.provider.random(32)
            secret = sha256(b"kd" + ephemeral + nonce
                            + ae_report.platform_signature)
            self.monitor.store_established_secret(ae, secret)
            self.secrets[ae.num] = secret
        else:
            self.monitor.trace.mark_attack_detected()
        self.monitor.trace.emit("verifier", "attest", {"ae": ae},
                                verdict.describe())
        self.monitor.trace.add_verdict({"ae": str(ae),
                                        "verdict": verdict.describe()})
        return verdict, reports

    def provision_secret(self, ae: EntityId) -> bool:
        """Deliver an encrypted token via the OS; only the attested instance
        can acknowledge it."""
        secret = self.secrets.get(ae.num)
        if secret is None:
            raise ScenarioInvalid(f"no accepted attestation for {ae}")
        token = self.provider.random(16)
        keystream = sha256(b"enc" + secret)[:16]
        ciphertext = bytes(a ^ b for a, b in zip(token, keystream))

        try:
            instance_secret = self.monitor.established_secret(ae)
        except UnknownEnclave:
            instance_secret = None
        if instance_secret is None:
            ack = b""
        else:
            recovered = bytes(a ^ b for a, b in zip(
                ciphertext, sha256(b"enc" + instance_secret)[:16]))
            ack = sha256(b"ack" + recovered)

        ok = ack == sha256(b"ack" + token)
        if not ok:
            self.monitor.trace.mark_attack_detected()
        self.monitor.trace.emit("verifier", "provision_secret", {"ae": ae},
                                "ok" if ok else "failed")
        return ok


class ScenarioRunner:
    """Builds the platform, executes actions, evaluates assertions."""

    def __init__(self, scenario: Scenario, *, seed: int | None = None,
                 max_entries: int | None = None):
        validate_scenario(scenario)
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        platform = scenario.platform
        self.provider = HashProvider(self.seed)
        tree = load_device_tree(platform.get("device_tree",
                                             DEFAULT_DEVICE_TREE))
        policy = IdentifierPolicy(platform.get("identifier_policy",
                                               "monotonic"))
        self.monitor = SecurityMonitor(
            tree, self.provider,
            max_entries=max_entries or platform.get("max_entries", 16),
            identifier_policy=policy,
            platform_key_seed=b"platform:" + str(self.seed).encode())
        self.trace = self.monitor.trace
        self.names: dict[str, EntityId] = {}
        self.regions: dict[str, int] = {}
        self.defs: dict[str, tuple[bytes, bytes]] = {}
        self.manufacturers: dict[str, object] = {}
        self.runtimes: dict[int, ControllerRuntime] = {}
        self.errors: dict[int, str] = {}
        self.verifier = RemoteVerifier(self.monitor, self.seed)
        self.last_verdict: Verdict | None = None
        self.last_reports: list = []
        self._build_peripherals(platform)

    # -- platform construction -------------------------------------------

    def _manufacturer(self, name: str):
        if name not in self.manufacturers:
            self.manufacturers[name] = self.provider.keygen(
                b"manufacturer:" + name.encode())
        return self.manufacturers[name]

    def _build_peripherals(self, platform: dict) -> None:
        for name in platform.get("manufacturers", ["acme"]):
            self._manufacturer(name)
        for spec in platform.get("peripherals", []):
            name = spec["name"]
            kind = _KINDS[spec["kind"]]
            maker = self._manufacturer(spec.get("manufacturer", "acme"))
            if "mmio" in spec:
                node = self.monitor.device_tree.node(spec["mmio"])
                binding = MmioBinding(node.range)
            else:
                binding = DmaBinding()
            model = build_peripheral(
                self.provider, maker, kind, binding,
                firmware_version=spec.get("firmware_version", "1.0"),
                key_seed=b"peripheral:" + name.encode(),
                certified=spec.get("certified", True))
            model.terminate_session_on_peer_death = spec.get(
                "terminate_session_on_peer_death", False)
            self.names[name] = self.monitor.attach_peripheral(model)

    # -- symbol resolution -------------------------------------------------

    def _entity(self, name: str) -> EntityId:
        try:
            return self.names[name]
        except KeyError:
            raise ScenarioInvalid(f"undefined entity {name!r}") from None

    def _region_id(self, ref) -> int:
        if isinstance(ref, int):
            return ref
        try:
            return self.regions[ref]
        except KeyError:
            raise ScenarioInvalid(f"undefined region {ref!r}") from None

    def _runtime_for(self, ce: EntityId) -> ControllerRuntime | None:
        if ce.num in self.runtimes:
            return self.runtimes[ce.num]
        desc = self.monitor.live_descriptor(ce)
        if desc is None:
            return None
        peripheral = next((peer for peer, _ in desc.connections
                           if peer.kind is EntityKind.PERIPHERAL), None)
        if peripheral is None:
            return None
        runtime = ControllerRuntime(
            self.monitor, ce, peripheral,
            trusted_manufacturer_keys=[kp.public
                                       for kp in self.manufacturers.values()])
        self.runtimes[ce.num] = runtime
        return runtime

    # -- policy -------------------------------------------------------------

    def _measurement_of(self, name: str) -> Measurement:
        try:
            code, config = self.defs[name]
        except KeyError:
            raise ScenarioInvalid(f"no definition for enclave {name!r}") \
                from None
        return measure(self.provider, code, config)

    def _resolve_policy(self, spec: dict | None, ae_name: str
                        ) -> VerificationPolicy:
        spec = spec or {}
        expected_ae = self._measurement_of(spec.get("ae", ae_name))
        if "ces" in spec:
            ce_measurements = tuple(self._measurement_of(n)
                                    for n in spec["ces"])
        else:
            ae_id = self._entity(spec.get("ae", ae_name))
            ce_measurements = []
            desc = self.monitor.live_descriptor(ae_id)
            for peer, _ in (desc.connections if desc else ()):
                peer_desc = self.monitor.live_descriptor(peer) \
                    if peer.kind is EntityKind.ENCLAVE else None
                if peer_desc is not None:
                    ce_measurements.append(peer_desc.measurement)
            ce_measurements = tuple(ce_measurements)
        manufacturers = spec.get("manufacturers", list(self.manufacturers))
        versions = spec.get("firmware_versions")
        if versions is None:
            versions = sorted({m.descriptor.firmware_version
                               for m in self.monitor.peripherals.values()})
        return VerificationPolicy(
            expected_ae_measurement=expected_ae,
            expected_ce_measurements=ce_measurements,
            expected_sm_measurement=self.monitor.sm_measurement,
            platform_public_key=self.monitor.platform_keys.public,
            trusted_manufacturer_keys=tuple(
                self._manufacturer(n).public for n in manufacturers),
            expected_firmware_versions=tuple(versions))

    # -- action dispatch ---------------------------------------------------

    def _range_of(self, action: dict) -> MemRange:
        if "node" in action:
            return self.monitor.device_tree.node(action["node"]).range
        return MemRange(_addr(action["base"]), int(action["size"]))

    def _payload_of(self, action: dict) -> bytes:
        raw = action.get("payload", "")
        if raw.startswith("0x"):
            return bytes.fromhex(raw[2:])
        return raw.encode()

    def _do_create(self, action: dict) -> None:
        name = action["name"]
        code = action.get("code", f"code:{name}").encode()
        config = action.get("config", "").encode()
        kind = EnclaveKind.CONTROLLER if action.get("kind") == "ce" \
            else EnclaveKind.APPLICATION
        rng = MemRange(_addr(action["base"]), int(action.get("size", 0x10000)))
        ident = self.monitor.create_enclave(code, config, rng, kind)
        self.names[name] = ident
        self.defs.setdefault(name, (code, config))

    def _do_connect(self, index: int, action: dict) -> None:
        a = self._entity(action["a"])
        b = self._entity(action["b"])
        rng = self._range_of(action)
        for party, other in ((a, b), (b, a)):
            if party.kind is EntityKind.PERIPHERAL:
                model = self.monitor.peripheral_model(party)
                if isinstance(model.descriptor.binding, DmaBinding):
                    self.monitor.negotiate_dma(party, rng)
                    verdict = self.monitor.verify_dma_region(party, other, rng)
                    if verdict is DmaVerdict.MISMATCH:
                        self.errors[index] = "Mismatch"
                        return
        rid = self.monitor.connect_enclaves(a, b, rng)
        self.regions[action.get("as", f"region{rid}")] = rid

    def _do_schedule(self, action: dict) -> None:
        target = self._entity(action["target"])
        runtime = self._runtime_for(target)
        if runtime is not None:
            runtime.run_once()
        else:
            self.monitor.enter_enclave(target)
            self.monitor.exit_to_os()

    def _do_ae_call(self, index: int, action: dict) -> None:
        ae = self._entity(action["ae"])
        ce = self._entity(action["ce"])
        runtime = self._runtime_for(ce)
        if runtime is None:
            raise ScenarioInvalid(f"{action['ce']} is not a controller with "
                                  f"a peripheral")
        reply = ae_call(runtime, ae, self._payload_of(action))
        if reply.status is not ReplyStatus.OK:
            self.errors[index] = {
                ReplyStatus.NOT_ATTESTED: "NotAttested",
                ReplyStatus.NO_SESSION: "NoSession",
                ReplyStatus.ERROR: "DriverError",
            }[reply.status]

    def _do_attest(self, action: dict) -> None:
        ae = self._entity(action["ae"])
        policy = self._resolve_policy(action.get("policy"), action["ae"])
        between_actions = action.get("between")
        between = None
        if between_actions:
            def between():
                for sub in between_actions:
                    self._dispatch(-1, sub)
        verdict, reports = self.verifier.attest(ae, policy, between)
        self.last_verdict = verdict
        self.last_reports = reports

    def _do_relaunch(self, action: dict) -> None:
        target = self._entity(action["target"])
        desc = self.monitor.live_descriptor(target)
        if desc is None:
            raise UnknownEnclave(f"{target} is not live")
        rng, kind = desc.private_range, desc.kind
        self.monitor.destroy_enclave(target)
        name = action["name"]
        code = action.get("code", f"evil:{name}").encode()
        ident = self.monitor.create_enclave(code, b"", rng, kind)
        self.names[name] = ident
        self.defs.setdefault(name, (code, b""))
        self.trace.emit("adversary", "relaunch_with_same_id",
                        {"was": target, "now": ident},
                        "same-id" if ident.num == target.num else "new-id")

    def _dispatch(self, index: int, action: dict) -> None:
        op = action["op"]
        if op == "os.create_enclave":
            self._do_create(action)
        elif op == "os.destroy_enclave":
            self.monitor.destroy_enclave(self._entity(action["target"]))
        elif op == "os.connect":
            self._do_connect(index, action)
        elif op == "os.sync_disconnect":
            self.monitor.sync_disconnect_enclaves(
                self._region_id(action["region"]))
        elif op == "os.read":
            self.monitor.checked_read(OS, _addr(action["base"]),
                                      int(action["len"]))
        elif op == "os.write":
            self.monitor.checked_write(OS, _addr(action["base"]),
                                       bytes.fromhex(action["data"]))
        elif op == "os.schedule":
            self._do_schedule(action)
        elif op == "env.set_sensor":
            model = self.monitor.peripheral_model(
                self._entity(action["peripheral"]))
            model.set_environment(int(action["value"]))
        elif op == "env.inject_key":
            model = self.monitor.peripheral_model(
                self._entity(action["peripheral"]))
            key = action["key"]
            model.inject_key(key if isinstance(key, int) else ord(key))
        elif op == "env.unplug":
            self.monitor.unplug_peripheral(self._entity(action["peripheral"]))
        elif op == "env.replug":
            peripheral = self._entity(action["peripheral"])
            maker_name = action.get("manufacturer", "acme")
            self.monitor.replug_peripheral(
                peripheral,
                firmware_version=action.get("firmware_version"),
                manufacturer_keypair=self._manufacturer(maker_name),
                certified=action.get("certified", True))
        elif op == "periph.lie_dma":
            model = self.monitor.peripheral_model(
                self._entity(action["peripheral"]))
            rng = None if action.get("base") is None else self._range_of(action)
            model.lie_dma(rng)
        elif op == "verifier.attest":
            self._do_attest(action)
        elif op == "verifier.provision_secret":
            self.verifier.provision_secret(self._entity(action["ae"]))
        elif op == "ae.call":
            self._do_ae_call(index, action)
        elif op == "adversary.relaunch_with_same_id":
            self._do_relaunch(action)
        else:  # pragma: no cover - validate_scenario rejects these
            raise ScenarioInvalid(f"unknown op {op!r}")

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        for index, action in enumerate(self.scenario.actions):
            try:
                self._dispatch(index, action)
            except ScenarioInvalid:
                raise
            except SimError as exc:
                self.errors[index] = exc.kind
                self.trace.emit("harness", action["op"],
                                {"action_index": index}, f"error:{exc.kind}")
            self.monitor.check_invariants()
        results = [self._evaluate(a) for a in self.scenario.assertions]
        return RunResult(self.scenario.name, self.trace, results, self.errors,
                         self.last_reports)

    # -- assertions ------------------------------------------------------------

    def _evaluate(self, assertion: dict) -> AssertionResult:
        kind = assertion["assert"]
        if kind == "expect_error":
            got = self.errors.get(int(assertion["action"]))
            want = assertion.get("error")
            return AssertionResult(assertion, got == want,
                                   f"got {got!r}, want {want!r}")
        if kind == "expect_verdict":
            if self.last_verdict is None:
                return AssertionResult(assertion, False, "no attestation ran")
            if assertion.get("accept"):
                return AssertionResult(assertion, self.last_verdict.accepted,
                                       self.last_verdict.describe())
            want = assertion.get("reject")
            got = self.last_verdict
            ok = (not got.accepted) and got.reason.value == want
            return AssertionResult(assertion, ok, got.describe())
        if kind == "expect_trace_absent":
            pattern = re.compile(assertion["pattern"])
            hit = next((line for line in self.trace.to_jsonl().splitlines()
                        if pattern.search(line)), None)
            return AssertionResult(assertion, hit is None,
                                   hit or "absent as expected")
        if kind == "expect_bytes":
            base = _addr(assertion["base"])
            length = int(assertion["len"])
            got = self.monitor.sm_read(base, length)
            want = bytes([int(assertion["value"])]) * length
            return AssertionResult(assertion, got == want,
                                   f"memory[{base:#x}+{length}]")
        if kind == "expect_attack_detected":
            return AssertionResult(assertion, self.trace.attack_detected,
                                   f"attack_detected={self.trace.attack_detected}")
        raise ScenarioInvalid(f"unknown assertion kind {kind!r}")


def run_scenario(scenario: Scenario | dict, *, seed: int | None = None,
                 max_entries: int | None = None) -> RunResult:
    if isinstance(scenario, dict):
        scenario = Scenario.from_dict(scenario)
    return ScenarioRunner(scenario, seed=seed, max_entries=max_entries).run()
