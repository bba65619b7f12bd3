#!/usr/bin/env python3
"""
App Package Parsers
Reads the simplified textual app format (manifest.xml + code.smali) and turns
it into a binary feature vector over a catalog.

MANIFEST: XML subset, elements uses-permission / action / category /
uses-feature with a `name` attribute; everything else is ignored.

SMALI-LITE: line oriented
    .class NAME
    .method NAME
        invoke CLASS->METHOD
        const-string "LITERAL"
    .end method
Real baksmali spellings (invoke-virtual {v0}, Lpkg/Cls;->m(I)V and
const-string v0, "x") are accepted as well.
"""

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from lxml import etree

import config
from errors import ParseError, ValidationError
from feature_catalog import FeatureCatalog, FeatureKind, as_vector

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.xml"
SMALI_FILE = "code.smali"

NAME_PREFIXES = ("android.permission.", "android.intent.", "android.hardware.")

# One dot between two identifiers: an invoke token or a Class.method key
DOTTED_RE = re.compile(r"^([A-Za-z_$][\w$]*)\.([A-Za-z_$<][\w$<>]*)$")
INVOKE_RE = re.compile(r"^invoke(?:-[\w/-]+)?\s+(?:\{[^}]*\}\s*,\s*)?(?P<cls>[\w/$;]+)->(?P<meth>[\w$<>]+)")
CONST_RE = re.compile(r'^const-string(?:/jumbo)?\s+(?:[vp]\d+\s*,\s*)?"(?P<lit>(?:[^"\\]|\\.)*)"\s*$')
ESCAPE_RE = re.compile(r"\\(u[0-9a-fA-F]{4}|.)")
UNESCAPES = {"n": "\n", "t": "\t", "r": "\r"}
ESCAPES = {"\\": "\\\\", '"': '\\"', "\n": "\\n", "\t": "\\t", "\r": "\\r"}


# ============================================================================
# MANIFEST
# ============================================================================

@dataclass(frozen=True)
class ManifestDoc:
    permissions: Tuple[str, ...] = ()
    intent_actions_categories: Tuple[str, ...] = ()
    hardware_features: Tuple[str, ...] = ()


def normalize_name(name: str) -> str:
    """android.permission.SEND_SMS -> SEND_SMS, android.intent.action.MAIN -> action.MAIN"""
    name = name.strip()
    for prefix in NAME_PREFIXES:
        if name.startswith(prefix):
            return name[len(prefix):]
    return name


def _local_name(qualified: str) -> str:
    return qualified.rsplit("}", 1)[-1]


def _name_attribute(element) -> Optional[str]:
    for key, value in element.attrib.items():
        if _local_name(key) == "name":
            return value
    return None


def parse_manifest(text: str) -> ManifestDoc:
    """
    Parse the manifest subset

    Args:
        text: XML document text

    Returns:
        ManifestDoc with deduplicated, order-preserving name lists
    """
    parser = etree.XMLParser(resolve_entities=False, no_network=True, remove_comments=True)
    try:
        root = etree.fromstring(text.encode("utf-8"), parser)
    except etree.XMLSyntaxError as e:
        line, column = (e.position if e.position else (None, None))
        raise ParseError(f"malformed manifest: {e.msg}", line, column) from None

    buckets: Dict[str, Dict[str, None]] = {"perm": {}, "intent": {}, "hw": {}}
    routes = {"uses-permission": "perm", "action": "intent", "category": "intent", "uses-feature": "hw"}

    for element in root.iter():
        if not isinstance(element.tag, str):
            continue
        bucket = routes.get(_local_name(element.tag))
        if bucket is None:
            continue
        name = _name_attribute(element)
        if name is None or not name.strip():
            raise ParseError(f"<{_local_name(element.tag)}> is missing its name attribute", element.sourceline)
        buckets[bucket].setdefault(normalize_name(name), None)

    return ManifestDoc(tuple(buckets["perm"]), tuple(buckets["intent"]), tuple(buckets["hw"]))


def serialize_manifest(doc: ManifestDoc) -> str:
    """Render a ManifestDoc back to the XML subset"""
    root = etree.Element("manifest")
    for name in doc.permissions:
        etree.SubElement(root, "uses-permission", name=name)
    if doc.intent_actions_categories:
        application = etree.SubElement(root, "application")
        intent_filter = etree.SubElement(application, "intent-filter")
        for name in doc.intent_actions_categories:
            tag = "category" if name.startswith("category.") else "action"
            etree.SubElement(intent_filter, tag, name=name)
    for name in doc.hardware_features:
        etree.SubElement(root, "uses-feature", name=name)
    return etree.tostring(root, pretty_print=True, encoding="unicode")


# ============================================================================
# SMALI-LITE
# ============================================================================

@dataclass(frozen=True)
class SmaliMethod:
    """Ordered tokens; literal_at holds the positions that came from const-string"""
    method_name: str
    tokens: Tuple[str, ...] = ()
    literal_at: FrozenSet[int] = frozenset()

    def is_literal(self, position: int) -> bool:
        return position in self.literal_at or not DOTTED_RE.match(self.tokens[position])


@dataclass(frozen=True)
class SmaliClass:
    class_name: str
    methods: Tuple[SmaliMethod, ...] = ()


@dataclass(frozen=True)
class SmaliUnit:
    classes: Tuple[SmaliClass, ...] = ()

    def iter_methods(self) -> Iterator[SmaliMethod]:
        for cls in self.classes:
            yield from cls.methods


def _simple_class_name(raw: str) -> str:
    name = raw.strip()
    if name.startswith("L") and name.endswith(";"):
        name = name[1:-1]
    return name.rsplit("/", 1)[-1]


def parse_smali(text: str) -> SmaliUnit:
    """
    Parse smali-lite text into classes, methods and ordered tokens

    Raises:
        ParseError: .method outside a class, nested or unterminated method,
            stray .end method, or an instruction outside a method
    """
    classes: List[SmaliClass] = []
    current_class: Optional[str] = None
    class_methods: List[SmaliMethod] = []
    method_name: Optional[str] = None
    method_line = 0
    tokens: List[str] = []
    literal_at: List[int] = []

    def close_class():
        if current_class is not None:
            classes.append(SmaliClass(current_class, tuple(class_methods)))

    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue

        if line.startswith(".class"):
            if method_name is not None:
                raise ParseError(f"unterminated method '{method_name}' (opened on line {method_line})", line_no)
            parts = line.split()
            if len(parts) < 2:
                raise ParseError(".class without a name", line_no)
            close_class()
            current_class = _simple_class_name(parts[-1])
            class_methods = []
        elif line.startswith(".end method"):
            if method_name is None:
                raise ParseError(".end method without an open method", line_no)
            class_methods.append(SmaliMethod(method_name, tuple(tokens), frozenset(literal_at)))
            method_name, tokens, literal_at = None, [], []
        elif line.startswith(".method"):
            if current_class is None:
                raise ParseError(".method without an enclosing .class", line_no)
            if method_name is not None:
                raise ParseError(f"unterminated method '{method_name}' (opened on line {method_line})", line_no)
            parts = line.split()
            if len(parts) < 2:
                raise ParseError(".method without a name", line_no)
            method_name = parts[-1].split("(", 1)[0]
            method_line = line_no
        elif line.startswith("invoke"):
            match = INVOKE_RE.match(line)
            if not match:
                raise ParseError("malformed invoke", line_no)
            if method_name is None:
                raise ParseError("invoke outside a method", line_no)
            tokens.append(f"{_simple_class_name(match.group('cls'))}.{match.group('meth')}")
        elif line.startswith("const-string"):
            match = CONST_RE.match(line)
            if not match:
                raise ParseError("malformed const-string", line_no)
            if method_name is None:
                raise ParseError("const-string outside a method", line_no)
            literal_at.append(len(tokens))
            tokens.append(unescape_literal(match.group("lit")))

    if method_name is not None:
        raise ParseError(f"unterminated method '{method_name}'", method_line)
    close_class()
    return SmaliUnit(tuple(classes))


def _unescape(match) -> str:
    code = match.group(1)
    if len(code) == 5:
        return chr(int(code[1:], 16))
    return UNESCAPES.get(code, code)


def unescape_literal(raw: str) -> str:
    """Undo const-string escapes: \\" \\\\ \\n \\t \\r and \\uXXXX"""
    return ESCAPE_RE.sub(_unescape, raw)


def escape_literal(text: str) -> str:
    """Inverse of unescape_literal; anything unprintable becomes \\uXXXX"""
    out = []
    for ch in text:
        if ch in ESCAPES:
            out.append(ESCAPES[ch])
        elif not ch.isprintable() and ord(ch) <= 0xFFFF:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    return "".join(out)


def serialize_smali(unit: SmaliUnit) -> str:
    lines = []
    for cls in unit.classes:
        lines.append(f".class {cls.class_name}")
        for method in cls.methods:
            lines.append(f".method {method.method_name}")
            for position, token in enumerate(method.tokens):
                if method.is_literal(position):
                    lines.append(f'    const-string "{escape_literal(token)}"')
                else:
                    cls_name, meth = DOTTED_RE.match(token).groups()
                    lines.append(f"    invoke {cls_name}->{meth}")
            lines.append(".end method")
        lines.append("")
    return "\n".join(lines)


# ============================================================================
# SEQUENCE MATCHING
# ============================================================================

def expand_units(tokens: Sequence[str]) -> List[str]:
    """Split Class.method tokens into their two units; literals stay whole"""
    units: List[str] = []
    for token in tokens:
        dotted = DOTTED_RE.match(token)
        if dotted:
            units.extend(dotted.groups())
        else:
            units.append(token)
    return units


def match_sequence(method_tokens: Sequence[str], pattern: Sequence[str]) -> bool:
    """True iff the pattern's units form an ordered subsequence of the method's units"""
    if not pattern:
        raise ValidationError("sequence pattern must be nonempty")
    wanted = expand_units(pattern)
    cursor = 0
    for unit in expand_units(method_tokens):
        if unit == wanted[cursor]:
            cursor += 1
            if cursor == len(wanted):
                return True
    return False


def parse_sequence_patterns(text: str) -> Dict[str, Tuple[str, ...]]:
    patterns: Dict[str, Tuple[str, ...]] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = [p for p in raw.rstrip("\r\n").split("\t")]
        name, keys = parts[0].strip(), tuple(k for k in parts[1:] if k)
        if not keys:
            raise ParseError(f"pattern '{name}' has no keys", line_no)
        if name in patterns:
            raise ParseError(f"duplicate pattern '{name}'", line_no)
        patterns[name] = keys
    return patterns


def load_sequence_patterns(path: Union[str, Path]) -> Dict[str, Tuple[str, ...]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"pattern file not found: {path}")
    return parse_sequence_patterns(path.read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_patterns() -> Dict[str, Tuple[str, ...]]:
    return load_sequence_patterns(config.PATTERNS_FILE)


# ============================================================================
# APP PACKAGE + EXTRACTION
# ============================================================================

@dataclass(frozen=True)
class AppPackage:
    manifest: ManifestDoc
    smali: SmaliUnit
    app_id: str = ""


def load_app(app_dir: Union[str, Path]) -> AppPackage:
    """Read manifest.xml and code.smali from an app directory"""
    app_dir = Path(app_dir)
    manifest_path, smali_path = app_dir / MANIFEST_FILE, app_dir / SMALI_FILE
    for part in (manifest_path, smali_path):
        if not part.is_file():
            raise ValidationError(f"app package {app_dir} is missing {part.name}")
    manifest_text = manifest_path.read_text(encoding="utf-8")
    try:
        manifest = parse_manifest(manifest_text) if manifest_text.strip() else ManifestDoc()
        smali = parse_smali(smali_path.read_text(encoding="utf-8"))
    except ParseError as e:
        raise ParseError(f"{app_dir.name}: {e}") from None
    return AppPackage(manifest, smali, app_dir.name)


def write_app(app: AppPackage, app_dir: Union[str, Path]) -> Path:
    app_dir = Path(app_dir)
    app_dir.mkdir(parents=True, exist_ok=True)
    (app_dir / MANIFEST_FILE).write_text(serialize_manifest(app.manifest), encoding="utf-8")
    (app_dir / SMALI_FILE).write_text(serialize_smali(app.smali), encoding="utf-8")
    return app_dir


def extract_features(app: AppPackage, catalog: FeatureCatalog,
                     patterns: Optional[Dict[str, Tuple[str, ...]]] = None) -> np.ndarray:
    """
    Vectorize an app against the catalog

    Args:
        app: Parsed app package
        catalog: Feature vocabulary
        patterns: Sequence patterns by feature name (shipped file by default)

    Returns:
        uint8 vector of len(catalog)
    """
    if patterns is None:
        patterns = default_patterns()
    bits = np.zeros(len(catalog), dtype=np.uint8)

    manifest_evidence = {
        FeatureKind.PERMISSION: set(app.manifest.permissions),
        FeatureKind.INTENT: set(app.manifest.intent_actions_categories),
        FeatureKind.HARDWARE: set(app.manifest.hardware_features),
    }
    methods = list(app.smali.iter_methods())
    api_tokens = {token for method in methods for token in method.tokens}

    for feat in catalog:
        if feat.kind in manifest_evidence:
            hit = feat.name in manifest_evidence[feat.kind]
        elif feat.kind is FeatureKind.API_CALL:
            hit = feat.name in api_tokens
        else:
            pattern = patterns.get(feat.name)
            if pattern is None:
                logger.debug("no sequence pattern for %s", feat.name)
                continue
            hit = any(match_sequence(m.tokens, pattern) for m in methods)
        if hit:
            bits[feat.id] = 1
    return bits


def extract_app_directory(app_dir: Union[str, Path], catalog: FeatureCatalog,
                          patterns: Optional[Dict[str, Tuple[str, ...]]] = None) -> Tuple[str, np.ndarray]:
    """Worker entry point: load one app directory and vectorize it"""
    app = load_app(app_dir)
    return app.app_id, extract_features(app, catalog, patterns)


def render_app(vector, catalog: FeatureCatalog,
               patterns: Optional[Dict[str, Tuple[str, ...]]] = None,
               app_id: str = "rendered") -> AppPackage:
    """
    Build an app package whose extraction reproduces the given vector

    API bits become one single-invoke method each; sequence bits become one
    method of literal units each, so no method can complete another pattern.
    """
    if patterns is None:
        patterns = default_patterns()
    vec = as_vector(vector, catalog)
    on = [catalog[i] for i in np.flatnonzero(vec)]

    manifest = ManifestDoc(
        tuple(f.name for f in on if f.kind is FeatureKind.PERMISSION),
        tuple(f.name for f in on if f.kind is FeatureKind.INTENT),
        tuple(f.name for f in on if f.kind is FeatureKind.HARDWARE),
    )
    methods = []
    for feat in on:
        if feat.kind is FeatureKind.API_CALL:
            methods.append(SmaliMethod(f"api{feat.id}", (feat.name,)))
        elif feat.kind is FeatureKind.SEQUENCE:
            if feat.name not in patterns:
                raise ValidationError(f"cannot render sequence feature without a pattern: {feat.name}")
            # literal units only, never invoke tokens
            units = tuple(expand_units(patterns[feat.name]))
            methods.append(SmaliMethod(f"seq{feat.id}", units, frozenset(range(len(units)))))
    smali = SmaliUnit((SmaliClass(app_id.replace("-", "_") or "App", tuple(methods)),)) if methods else SmaliUnit()
    return AppPackage(manifest, smali, app_id)
