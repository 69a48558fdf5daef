"""Bundled topologies with the service counts of the three benchmark apps.

Per-service demands are synthetic.  ``base_rps`` is chosen so the busiest
service needs at most ~14 replicas at 2.5x base load, and the SLA is a fixed
multiple of the idle critical-path latency.
"""
from __future__ import annotations

import math

import numpy as np

from .topology import EdgeSpec, RequestType, ServiceGraphSpec, ServiceSpec

SLA_FACTOR = 4.0
PEAK_FACTOR = 2.5
PEAK_REPLICAS = 14


def _finish(name, services, edges, entry, request_types, sla_factor=SLA_FACTOR) -> ServiceGraphSpec:
    spec = ServiceGraphSpec(name, services, edges, entry, sla_ms=1.0, request_types=request_types)
    spec.sla_ms = round(sla_factor * spec.idle_latency(), 3)
    visits = spec.visits()
    per_rps = np.array([v * s.cpu_per_request / (0.7 * s.cores_per_replica) for v, s in zip(visits, services)])
    spec.base_rps = float(math.floor(PEAK_REPLICAS / (PEAK_FACTOR * per_rps.max())))
    return spec


def bookinfo4() -> ServiceGraphSpec:
    services = [
        ServiceSpec("productpage", 0.020, 15.0, 1.0),
        ServiceSpec("details", 0.008, 6.0, 0.5),
        ServiceSpec("reviews", 0.015, 12.0, 1.0),
        ServiceSpec("ratings", 0.006, 5.0, 0.5),
    ]
    edges = [
        EdgeSpec("productpage", "details", 1.0),
        EdgeSpec("productpage", "reviews", 1.0),
        EdgeSpec("reviews", "ratings", 1.0),
    ]
    types = [
        RequestType("with-ratings", 0.67),
        RequestType(
            "no-ratings",
            0.33,
            edges=[("productpage", "details"), ("productpage", "reviews")],
        ),
    ]
    return _finish("bookinfo4", services, edges, "productpage", types)


def boutique11() -> ServiceGraphSpec:
    services = [
        ServiceSpec("frontend", 0.012, 10.0, 1.0),
        ServiceSpec("productcatalog", 0.004, 4.0, 0.5),
        ServiceSpec("currency", 0.002, 3.0, 0.5),
        ServiceSpec("cart", 0.005, 6.0, 0.5),
        ServiceSpec("rediscart", 0.002, 2.0, 0.5),
        ServiceSpec("recommendation", 0.006, 8.0, 0.5),
        ServiceSpec("ad", 0.004, 5.0, 0.5),
        ServiceSpec("checkout", 0.010, 12.0, 1.0),
        ServiceSpec("payment", 0.003, 4.0, 0.5),
        ServiceSpec("shipping", 0.003, 4.0, 0.5),
        ServiceSpec("email", 0.004, 5.0, 0.5),
    ]
    edges = [
        EdgeSpec("frontend", "productcatalog", 2.0),
        EdgeSpec("frontend", "currency", 3.0),
        EdgeSpec("frontend", "cart", 1.0),
        EdgeSpec("frontend", "recommendation", 1.0),
        EdgeSpec("frontend", "ad", 1.0),
        EdgeSpec("frontend", "checkout", 1.0),
        EdgeSpec("frontend", "shipping", 1.0),
        EdgeSpec("cart", "rediscart", 1.0),
        EdgeSpec("recommendation", "productcatalog", 1.0),
        EdgeSpec("checkout", "cart", 1.0),
        EdgeSpec("checkout", "productcatalog", 1.0),
        EdgeSpec("checkout", "currency", 2.0),
        EdgeSpec("checkout", "payment", 1.0),
        EdgeSpec("checkout", "shipping", 1.0),
        EdgeSpec("checkout", "email", 1.0),
    ]
    types = [
        RequestType("browse", 0.6, ["productcatalog", "currency", "recommendation", "ad"]),
        RequestType("cart", 0.3, ["cart", "currency", "shipping", "productcatalog"]),
        RequestType("checkout", 0.1, ["checkout", "currency"]),
    ]
    return _finish("boutique11", services, edges, "frontend", types)


_TT_NAMES = [
    "ui-dashboard", "auth", "user", "verification-code", "station", "train", "route",
    "config", "price", "basic", "ticketinfo", "seat", "order", "order-other", "travel",
    "travel2", "travel-plan", "route-plan", "contacts", "preserve", "preserve-other",
    "security", "assurance", "food", "food-map", "consign", "consign-price",
    "inside-payment", "payment", "cancel", "rebook", "execute", "notification", "news",
    "voucher", "admin-basic-info", "admin-order", "admin-route", "admin-travel",
    "admin-user", "delivery",
]

_TT_CALLS = {
    "ui-dashboard": ["auth", "verification-code", "user", "station", "travel", "travel2", "travel-plan",
                     "route-plan", "order", "order-other", "contacts", "preserve", "preserve-other",
                     "food", "consign", "assurance", "inside-payment", "cancel", "rebook", "execute",
                     "news", "voucher", "admin-basic-info", "admin-order", "admin-route",
                     "admin-travel", "admin-user"],
    "auth": ["verification-code"],
    "user": ["auth"],
    "travel": ["basic", "route", "train", "seat", "ticketinfo"],
    "travel2": ["basic", "route", "train", "seat", "ticketinfo"],
    "ticketinfo": ["basic"],
    "basic": ["station", "train", "route", "price"],
    "seat": ["order", "order-other", "config"],
    "travel-plan": ["route-plan", "travel", "travel2", "seat", "station"],
    "route-plan": ["route", "travel", "travel2", "station"],
    "preserve": ["security", "contacts", "travel", "station", "seat", "order", "assurance", "food",
                 "consign", "user", "notification", "basic"],
    "preserve-other": ["security", "contacts", "travel2", "station", "seat", "order-other",
                       "assurance", "food", "consign", "user", "notification", "basic"],
    "security": ["order", "order-other"],
    "food": ["food-map", "travel", "station", "delivery"],
    "consign": ["consign-price"],
    "inside-payment": ["order", "order-other", "payment"],
    "cancel": ["order", "order-other", "inside-payment", "notification", "user"],
    "rebook": ["order", "order-other", "travel", "travel2", "station", "seat", "inside-payment"],
    "execute": ["order", "order-other"],
    "admin-basic-info": ["station", "train", "config", "price", "contacts"],
    "admin-order": ["order", "order-other"],
    "admin-route": ["route", "station"],
    "admin-travel": ["travel", "travel2", "station", "train", "route"],
    "admin-user": ["user"],
    "order": ["station"],
    "order-other": ["station"],
}


def trainticket41() -> ServiceGraphSpec:
    rng = np.random.default_rng(41)
    services = []
    for name in _TT_NAMES:
        cores = 1.0 if name in ("ui-dashboard", "travel", "travel2", "basic", "preserve", "order") else 0.5
        services.append(
            ServiceSpec(name, float(np.round(rng.uniform(0.002, 0.008), 4)), float(np.round(rng.uniform(3, 12), 1)), cores)
        )
    edges = [EdgeSpec(src, dst, 1.0) for src, dsts in _TT_CALLS.items() for dst in dsts]
    types = [
        RequestType("search", 0.45, ["travel", "travel2", "travel-plan", "route-plan", "station"]),
        RequestType("login", 0.10, ["auth", "verification-code", "user"]),
        RequestType("query-orders", 0.15, ["order", "order-other", "contacts", "news", "voucher"]),
        RequestType("preserve", 0.12, ["preserve", "preserve-other", "food", "consign", "assurance"]),
        RequestType("pay-and-change", 0.10, ["inside-payment", "cancel", "rebook", "execute"]),
        RequestType(
            "admin", 0.08, ["admin-basic-info", "admin-order", "admin-route", "admin-travel", "admin-user"]
        ),
    ]
    return _finish("trainticket41", services, edges, "ui-dashboard", types)


def cascade3() -> ServiceGraphSpec:
    """A -> {B, C}: the minimal topology for the bottleneck-shifting scenario."""
    services = [
        ServiceSpec("A", 0.010, 8.0, 1.0),
        ServiceSpec("B", 0.010, 8.0, 1.0),
        ServiceSpec("C", 0.010, 8.0, 1.0),
    ]
    edges = [EdgeSpec("A", "B", 1.0), EdgeSpec("A", "C", 1.0)]
    return _finish("cascade3", services, edges, "A", [])


PRESETS = {
    "bookinfo4": bookinfo4,
    "boutique11": boutique11,
    "trainticket41": trainticket41,
    "cascade3": cascade3,
}


def get_preset(name: str) -> ServiceGraphSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
