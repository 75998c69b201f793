"""
Writer for the DOT language.

Used for PPG drawings: one cluster (column) per rank, vertices in flow
order, communication edges drawn across the columns.
"""

from typing import Dict, TextIO

# light -> dark, used to shade vertices by their share of the largest time
HEAT = ("#fff5eb", "#fdd0a2", "#fd8d3c", "#d94801", "#7f2704")


def heat_color(weight: float) -> str:
    weight = min(max(weight, 0.0), 1.0)
    return HEAT[min(int(weight * len(HEAT)), len(HEAT) - 1)]


class DotWriter:
    def __init__(self, fp: TextIO):
        self.fp = fp
        self.depth = 1

    def begin_graph(self, name: str = "G"):
        self.write(f"digraph {self.id(name)} {{\n")

    def end_graph(self):
        self.write("}\n")

    def begin_cluster(self, name: str, **attrs):
        self.write("\t" * self.depth + f"subgraph {self.id('cluster_' + name)} {{\n")
        self.depth += 1
        for key, value in attrs.items():
            self.write("\t" * self.depth + f"{key}={self.id(value)};\n")

    def end_cluster(self):
        self.depth -= 1
        self.write("\t" * self.depth + "}\n")

    def attr(self, what: str, **attrs):
        self.write("\t" * self.depth + what + self.attr_list(attrs) + ";\n")

    def node(self, node: str, **attrs):
        self.write("\t" * self.depth + self.id(node) + self.attr_list(attrs) + ";\n")

    def edge(self, src: str, dst: str, **attrs):
        self.write("\t" * self.depth + f"{self.id(src)} -> {self.id(dst)}" + self.attr_list(attrs) + ";\n")

    def attr_list(self, attrs: Dict) -> str:
        if not attrs:
            return ""
        return " [" + ", ".join(f"{self.id(k)}={self.id(v)}" for k, v in attrs.items()) + "]"

    def id(self, value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, (int, float)):
            return str(value)
        if isinstance(value, str):
            if value.isidentifier():
                return value
            return self.escape(value)
        raise TypeError(f"cannot write {type(value).__name__} as a DOT id")

    @staticmethod
    def escape(s: str) -> str:
        s = s.replace("\\", r"\\").replace("\n", r"\n").replace("\t", r"\t").replace('"', r'\"')
        return '"' + s + '"'

    def write(self, s: str):
        self.fp.write(s)


def node_name(rank: int, vid: int) -> str:
    return f"r{rank}_v{vid}"
