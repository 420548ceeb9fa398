"""NAT classification and connectability rules.

Classification runs the three-probe decision tree against a dual-homed
probe server: mapped-equals-local, reply-from-alternate-address, and
mapped-stability across destinations with an alternate-port tiebreak.
Only this minimal subset of the standard is implemented.
"""
from __future__ import annotations

import enum
from typing import Protocol

from .errors import NetworkUnreachable


class NatType(enum.Enum):
    PUBLIC = "public"
    FULL_CONE = "full_cone"
    ADDRESS_RESTRICTED = "address_restricted"
    PORT_RESTRICTED = "port_restricted"
    SYMMETRIC = "symmetric"


class Route(enum.Enum):
    DIRECT = "direct"
    HOLE_PUNCH = "hole_punch"
    RELAY = "relay"
    UNREACHABLE = "unreachable"


# The three wire kinds a registration record may carry.
WIRE_NAT_KINDS = ("public", "full_cone", "non_full_cone")


def wire_nat_kind(nat: NatType) -> str:
    """Collapse the five classification outcomes to the three wire kinds."""
    if nat is NatType.PUBLIC:
        return "public"
    if nat is NatType.FULL_CONE:
        return "full_cone"
    return "non_full_cone"


def needs_relay(nat: NatType) -> bool:
    """Hole punching cannot open these NATs for unsolicited inbound traffic."""
    return nat in (NatType.ADDRESS_RESTRICTED, NatType.PORT_RESTRICTED, NatType.SYMMETRIC)


class StunProbes(Protocol):
    """Probe surface the classifier needs.

    probe() sends a binding request to the primary (server=0) or secondary
    (server=1) server address, optionally asking the reply to come from the
    alternate address and/or alternate port. It returns the mapped
    (address, port) seen by the server, or None when no reply arrives.
    """

    def probe(
        self, server: int = 0, change_address: bool = False, change_port: bool = False
    ) -> tuple[str, int] | None:
        ...

    def local_endpoint(self) -> tuple[str, int]:
        ...


def stun_classify(probes: StunProbes) -> NatType:
    mapped = probes.probe(server=0)
    if mapped is None:
        raise NetworkUnreachable("no reply from any probe server")
    if mapped == probes.local_endpoint():
        return NatType.PUBLIC
    # Behind a NAT: does a reply from the alternate server address get in?
    if probes.probe(server=0, change_address=True, change_port=True) is not None:
        return NatType.FULL_CONE
    mapped_other = probes.probe(server=1)
    if mapped_other is None:
        raise NetworkUnreachable("no reply from alternate probe server")
    if mapped_other != mapped:
        return NatType.SYMMETRIC
    # Stable mapping; restricted variant distinguished by the alternate-port test.
    if probes.probe(server=0, change_port=True) is not None:
        return NatType.ADDRESS_RESTRICTED
    return NatType.PORT_RESTRICTED


def connect_strategy(
    initiator: NatType,
    responder: NatType,
    responder_has_relay: bool,
    coordinated: bool = False,
) -> Route:
    """Pick the route for reaching the responder. Total and deterministic.

    coordinated=True means prior outbound traffic from a restricted-cone
    responder toward the initiator can be arranged; the default flow never
    sets it and restricted responders go through their relay.
    """
    if responder is NatType.PUBLIC:
        return Route.DIRECT
    if responder is NatType.FULL_CONE:
        return Route.HOLE_PUNCH
    if responder in (NatType.ADDRESS_RESTRICTED, NatType.PORT_RESTRICTED) and coordinated:
        return Route.HOLE_PUNCH
    if responder_has_relay:
        return Route.RELAY
    return Route.UNREACHABLE


def route_for_record(initiator: NatType, record_nat_kind: str, record_has_relay: bool) -> Route:
    """connect_strategy over the three wire kinds a located record carries."""
    kind = {
        "public": NatType.PUBLIC,
        "full_cone": NatType.FULL_CONE,
        "non_full_cone": NatType.SYMMETRIC,
    }.get(record_nat_kind)
    if kind is None:
        return Route.UNREACHABLE
    return connect_strategy(initiator, kind, record_has_relay)
