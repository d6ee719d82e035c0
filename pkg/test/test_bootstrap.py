#!/usr/bin/env python3
"""
Tests for the gateway state machine and the self-integration handshake in SIM
"""

import pytest

from bootstrap_protocol import (
    ApplicationAgentPeerlet,
    DeviceInfo,
    DeviceRegistration,
    GatewayPeerlet,
    GatewayPhase,
    GatewayState,
    MessageType,
    OperatorPeerlet,
    ProtocolMessage,
    ServiceAgentPeerlet,
    ServiceMetadata,
    ServiceRequest,
    agn_ready_msg,
    gateway_announce,
    register_device,
    request_service,
)
from peerbed_errors import CapacityError, ProtocolError
from runtime_core import PeerNetwork, run_simulation

SERVICE = "svc"
DEVICE = DeviceInfo("meter", "zone-a")


def _gateway(agents=("sim:10", "sim:11")):
    gw = GatewayState("sim:1", SERVICE, list(agents))
    gateway_announce(gw, ["sim:20", "sim:21"])
    return gw


def _register(gw, dev_addr):
    return register_device(gw, DeviceRegistration(dev_addr, DEVICE, SERVICE))


def test_announce_broadcasts_to_every_application_agent():
    gw = GatewayState("sim:1", SERVICE, ["sim:10"])
    outbound = gateway_announce(gw, ["sim:20", "sim:21"])
    assert [addr for addr, _ in outbound] == ["sim:20", "sim:21"]
    assert all(msg.msg_type is MessageType.BROADCAST for _, msg in outbound)
    assert outbound[0][1]["GWAddr"] == "sim:1"
    assert gw.phase is GatewayPhase.ANNOUNCED


def test_registration_before_announce_rejected():
    gw = GatewayState("sim:1", SERVICE, ["sim:10"])
    with pytest.raises(ProtocolError):
        _register(gw, "sim:20")


def test_registration_binds_distinct_agents():
    gw = _gateway()
    first = _register(gw, "sim:20")
    second = _register(gw, "sim:21")
    assert first["agnAddr"] == "sim:10"
    assert second["agnAddr"] == "sim:11"
    assert gw.bindings == [("sim:20", "sim:10"), ("sim:21", "sim:11")]
    gw.check_invariants()


def test_repeated_registration_returns_same_agent():
    gw = _gateway()
    assert _register(gw, "sim:20")["agnAddr"] == _register(gw, "sim:20")["agnAddr"]
    assert len(gw.registrations) == 1


def test_registration_beyond_capacity_fails():
    gw = _gateway(agents=["sim:10"])
    _register(gw, "sim:20")
    with pytest.raises(CapacityError):
        _register(gw, "sim:21")


def test_registration_for_other_service_rejected():
    gw = _gateway()
    with pytest.raises(ProtocolError):
        register_device(gw, DeviceRegistration("sim:20", DEVICE, "other"))


def test_service_request_needs_enough_agents():
    gw = _gateway()
    _register(gw, "sim:20")
    with pytest.raises(ProtocolError):
        request_service(gw, ServiceRequest(SERVICE, ServiceMetadata(2, 2)))


def test_ready_round_then_run():
    gw = _gateway()
    _register(gw, "sim:20")
    _register(gw, "sim:21")
    outbound = request_service(gw, ServiceRequest(SERVICE, ServiceMetadata(2, 2)))
    assert gw.phase is GatewayPhase.PREPARING
    assert {addr for addr, _ in outbound} == {"sim:10", "sim:11"}
    assert outbound[0][1]["servMD"]["params"]["devAddr"] == "sim:20"

    assert gw.agent_ready(agn_ready_msg("sim:10", SERVICE)) == []
    runs = gw.agent_ready(agn_ready_msg("sim:11", SERVICE))
    assert gw.phase is GatewayPhase.RUNNING
    assert sorted(addr for addr, _ in runs) == ["sim:10", "sim:11"]
    assert all(msg.msg_type is MessageType.RUN_SERV for _, msg in runs)


def test_ready_from_unassigned_agent_rejected():
    gw = _gateway()
    _register(gw, "sim:20")
    request_service(gw, ServiceRequest(SERVICE, ServiceMetadata(1, 1)))
    with pytest.raises(ProtocolError):
        gw.agent_ready(agn_ready_msg("sim:99", SERVICE))


def test_abort_readiness_reports_silent_agents():
    gw = _gateway()
    _register(gw, "sim:20")
    _register(gw, "sim:21")
    request_service(gw, ServiceRequest(SERVICE, ServiceMetadata(2, 2)))
    gw.agent_ready(agn_ready_msg("sim:10", SERVICE))
    assert gw.abort_readiness() == ["sim:11"]
    assert gw.phase is GatewayPhase.ASSIGNING


def test_rejoin_while_running_gets_single_ready_round():
    gw = _gateway()
    _register(gw, "sim:20")
    request_service(gw, ServiceRequest(SERVICE, ServiceMetadata(1, 1)))
    gw.agent_ready(agn_ready_msg("sim:10", SERVICE))
    late = gw.rejoin("sim:10")
    assert [addr for addr, _ in late] == ["sim:10"]
    assert late[0][1].msg_type is MessageType.READY
    again = gw.agent_ready(agn_ready_msg("sim:10", SERVICE))
    assert [msg.msg_type for _, msg in again] == [MessageType.RUN_SERV]
    assert gw.agent_ready(agn_ready_msg("sim:10", SERVICE)) == []


def test_message_fields_enforced():
    with pytest.raises(ProtocolError):
        ProtocolMessage(MessageType.ASGN_AGN, {"agnAddr": "sim:10", "extra": 1})


def test_undecodable_body_rejected():
    with pytest.raises(ProtocolError):
        ProtocolMessage.decode(int(MessageType.RUN_SERV), b"\xff\xfe")
    with pytest.raises(ProtocolError):
        ProtocolMessage.decode(int(MessageType.RUN_SERV), b"[1, 2]")


def test_metadata_requires_positive_counts():
    with pytest.raises(ProtocolError):
        ServiceMetadata(0, 1)


class EchoService(ServiceAgentPeerlet):
    """Requests one sensing value on run and actuates with its double"""

    def __init__(self, gateway_id, silent=False):
        super().__init__(SERVICE, gateway_id, silent=silent)
        self.sensed = []

    def on_run(self):
        self.request_sensing({"what": "load"})

    def on_sensing(self, data):
        self.sensed.append(data)
        self.send_actuation(data * 2)


def _handshake_network(silent_agent=None):
    network = PeerNetwork(seed=1)
    agents = [10, 11, 12]
    devices = [20, 21, 22]
    network.create_peer(1, [GatewayPeerlet({SERVICE: agents}, {SERVICE: devices})])
    services = {}
    for agent in agents:
        services[agent] = EchoService(1, silent=agent == silent_agent)
        network.create_peer(agent, [services[agent]])
    apps = {}
    for index, device in enumerate(devices):
        apps[device] = ApplicationAgentPeerlet(SERVICE, DEVICE, sensing_source=lambda req, v=index + 1: v)
        network.create_peer(device, [apps[device]])
    operator = OperatorPeerlet(ServiceRequest(SERVICE, ServiceMetadata(3, 3)), 1)
    network.create_peer(2, [operator])
    return network, services, apps, operator


def test_handshake_runs_service_and_moves_data_directly():
    network, services, apps, operator = _handshake_network()
    trace = run_simulation(network.peers, 500, 1)
    assert operator.status == "running"
    assert sorted(operator.running_agents) == [10, 11, 12]
    assert all(s.running for s in services.values())
    assert sorted(a.actuations[0] for a in apps.values()) == [2, 4, 6]
    assert sorted(s.sensed[0] for s in services.values()) == [1, 2, 3]
    gateway_types = {int(e.fields()["type"]) for e in trace.deliveries() if e.peer_id == 1}
    assert MessageType.SENSING not in gateway_types
    assert MessageType.ACTUATION not in gateway_types


def test_silent_agent_triggers_readiness_abort_and_retry():
    network, services, _, operator = _handshake_network(silent_agent=11)
    run_simulation(network.peers, 1500, 1)
    assert operator.status_history[0] == "aborted"
    assert operator.attempts == 2
    assert not any(s.running for s in services.values())


def test_sensing_from_foreign_peer_rejected():
    network, services, apps, _ = _handshake_network()
    run_simulation(network.peers, 500, 1)
    device = apps[20]
    stranger = network.peer(21)
    stranger.send(20, int(MessageType.ACTUATION), b'{"actuation":1,"servInfo":"svc"}')
    network.sim.run(600)
    assert device.rejected == 1


def test_service_data_before_run_rejected():
    service = EchoService(1)
    with pytest.raises(ProtocolError, match="before runServMsg"):
        service.send_actuation(1)
    with pytest.raises(ProtocolError, match="before runServMsg"):
        service.request_sensing()
