"""Synthetic stand-ins for the Edge-IIoTset and TON-IoT flow CSVs.

Column names follow the public datasets. Each class draws a handful of
"signature" columns from class-specific value sets (with a leak rate back to
the shared background), every other column from a background distribution
shared by all classes. A few extra columns carry sporadic empty cells so that
null-column removal leaves 61 and 44 features respectively.
"""
from __future__ import annotations

import csv
import zlib
from pathlib import Path

import numpy as np

EDGE_FEATURES = (
    "frame.time ip.src_host ip.dst_host arp.dst.proto_ipv4 arp.opcode arp.hw.size "
    "arp.src.proto_ipv4 icmp.checksum icmp.seq_le icmp.transmit_timestamp icmp.unused "
    "http.file_data http.content_length http.request.uri.query http.request.method "
    "http.referer http.request.full_uri http.request.version http.response http.tls_port "
    "tcp.ack tcp.ack_raw tcp.checksum tcp.connection.fin tcp.connection.rst "
    "tcp.connection.syn tcp.connection.synack tcp.dstport tcp.flags tcp.flags.ack tcp.len "
    "tcp.options tcp.payload tcp.seq tcp.srcport udp.port udp.stream udp.time_delta "
    "dns.qry.name dns.qry.name.len dns.qry.qu dns.qry.type dns.retransmission "
    "dns.retransmit_request dns.retransmit_request_in mqtt.conack.flags "
    "mqtt.conflag.cleansess mqtt.conflags mqtt.hdrflags mqtt.len mqtt.msg_decoded_as "
    "mqtt.msg mqtt.msgtype mqtt.proto_len mqtt.protoname mqtt.topic mqtt.topic_len mqtt.ver "
    "mbtcp.len mbtcp.trans_id mbtcp.unit_id"
).split()
EDGE_NULLABLE = ("http.request.uri.path", "dns.resp.ttl", "mqtt.willmsg")

TON_FEATURES = (
    "ts src_ip src_port dst_ip dst_port proto service duration src_bytes dst_bytes "
    "conn_state missed_bytes src_pkts src_ip_bytes dst_pkts dst_ip_bytes dns_query "
    "dns_qclass dns_qtype dns_rcode dns_AA dns_RD dns_RA dns_rejected ssl_version "
    "ssl_cipher ssl_resumed ssl_established ssl_subject ssl_issuer http_trans_depth "
    "http_method http_uri http_referrer http_version http_request_body_len "
    "http_response_body_len http_status_code http_user_agent http_orig_mime_types "
    "http_resp_mime_types weird_name weird_addl weird_notice"
).split()
TON_NULLABLE = ("http_cookie", "ssl_sni", "dns_answers")

EDGE_CLASSES = (
    "Normal", "DDoS_UDP", "Password", "XSS", "Backdoor", "SQL_injection", "Fingerprinting",
    "MITM", "Port_Scanning", "Uploading", "DDoS_TCP", "DDoS_ICMP", "DDoS_HTTP", "Ransomware",
    "Vulnerability_scanner",
)
# TON-IoT families, already renamed onto the Edge-IIoTset label names.
TON_CLASSES = (
    "Normal", "Backdoor", "DDoS_TCP", "Password", "Ransomware", "XSS", "SQL_injection",
    "MITM", "Port_Scanning",
)

N_SIGNATURE = 8
LEAK = 0.15
NULL_RATE = 0.05


def _column_kinds(columns, rng):
    """Roughly a third of the columns are continuous, the rest categorical."""
    kinds = {}
    for col in columns:
        if rng.random() < 0.3:
            kinds[col] = ("cont", None)
        else:
            pool = [str(v) for v in rng.choice(65536, size=int(rng.integers(4, 9)), replace=False)]
            kinds[col] = ("cat", pool)
    return kinds


def _background(kind, rng):
    tag, pool = kind
    if tag == "cat":
        return pool[int(rng.integers(len(pool)))]
    return f"{rng.lognormal(0.0, 1.5):.6f}"


def _class_profile(columns, kinds, name, dataset_seed):
    rng = np.random.default_rng([dataset_seed, zlib.crc32(name.encode())])
    cols = list(rng.choice(len(columns), size=N_SIGNATURE, replace=False))
    profile = {}
    for i in cols:
        col = columns[int(i)]
        tag, _ = kinds[col]
        if tag == "cat":
            values = [str(v) for v in rng.choice(65536, size=int(rng.integers(1, 3)), replace=False)]
            profile[col] = ("cat", values)
        else:
            profile[col] = ("cont", float(rng.uniform(3.0, 9.0)))
    return profile


def _sample(columns, kinds, profile, rng):
    row = []
    for col in columns:
        sig = profile.get(col)
        if sig is None or rng.random() < LEAK:
            row.append(_background(kinds[col], rng))
        elif sig[0] == "cat":
            row.append(sig[1][int(rng.integers(len(sig[1])))])
        else:
            row.append(f"{rng.lognormal(sig[1], 0.3):.6f}")
    return row


def write_dataset(path, features, nullable, classes, rows_per_class, seed, dataset_seed):
    kinds_rng = np.random.default_rng([dataset_seed, 7])
    columns = list(features) + list(nullable)
    kinds = _column_kinds(columns, kinds_rng)
    profiles = {c: _class_profile(columns, kinds, c, dataset_seed) for c in classes}
    rng = np.random.default_rng([seed, dataset_seed])
    rows = []
    for name in classes:
        for _ in range(rows_per_class):
            row = _sample(columns, kinds, profiles[name], rng)
            for j in range(len(features), len(columns)):
                if rng.random() < NULL_RATE:
                    row[j] = ""
            rows.append(row + [name, "0" if name == "Normal" else "1"])
    order = rng.permutation(len(rows))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns + ["Attack_type", "Attack_label"])
        for i in order:
            w.writerow(rows[i])
    return path


def write_synthetic(out_dir, seed: int = 0, edge_rows: int = 300, ton_rows: int = 200):
    """Write ``edge_iiot.csv`` and ``ton_iot.csv`` into ``out_dir``; returns both paths."""
    out = Path(out_dir)
    edge = write_dataset(out / "edge_iiot.csv", EDGE_FEATURES, EDGE_NULLABLE, EDGE_CLASSES,
                         edge_rows, seed, 1)
    ton = write_dataset(out / "ton_iot.csv", TON_FEATURES, TON_NULLABLE, TON_CLASSES,
                        ton_rows, seed, 2)
    return edge, ton
