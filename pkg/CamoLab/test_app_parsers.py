"""Manifest and smali-lite parsing, sequence matching, extraction of the bundled apps"""

import numpy as np
import pytest

import config
from app_parsers import (ManifestDoc, SmaliClass, SmaliMethod, SmaliUnit, expand_units, extract_app_directory,
                         extract_features, load_app, match_sequence, normalize_name, parse_manifest,
                         parse_sequence_patterns, parse_smali, render_app, serialize_manifest, serialize_smali,
                         write_app)
from errors import ParseError, ValidationError

APPS = config.SAMPLE_APPS_DIR

EXPECTED = {
    "benign/notes_app": {
        "INTERNET", "ACCESS_NETWORK_STATE", "WAKE_LOCK", "VIBRATE", "touchscreen", "action.MAIN",
        "category.LAUNCHER", "HttpURLConnection.getResponseCode", "HttpURLConnection.disconnect",
        "PowerManager.isScreenOn", "NotificationManager.notify",
    },
    "benign/weather_app": {
        "INTERNET", "ACCESS_NETWORK_STATE", "READ_EXTERNAL_STORAGE", "sensor.accelerometer", "action.MAIN",
        "category.LAUNCHER", "action.VIEW", "category.DEFAULT", "category.BROWSABLE",
        "URLConnection.setConnectTimeout", "URLConnection.getContentType", "LocationManager.getBestProvider",
        "WifiManager.isWifiEnabled",
    },
    "malicious/sms_stealer": {
        "INTERNET", "READ_SMS", "SEND_SMS", "RECEIVE_SMS", "READ_PHONE_STATE", "RECEIVE_BOOT_COMPLETED",
        "telephony", "action.MAIN", "category.LAUNCHER", "SmsManager.getDefault", "SmsManager.divideMessage",
        "SmsManager.sendTextMessage", "TelephonyManager.getDeviceId", "TelephonyManager.getSubscriberId",
        "TelephonyManager.getSimSerialNumber", "Send Sms", "Intercept Sms receiver",
        "Get phone type/Sim serial number/device id/subscriber id/IMSI",
    },
    "malicious/dropper": {
        "INTERNET", "INSTALL_PACKAGES", "WRITE_EXTERNAL_STORAGE", "GET_TASKS", "SYSTEM_ALERT_WINDOW",
        "action.MAIN", "category.HOME", "category.DEFAULT", "Runtime.getRuntime", "Runtime.exec",
        "DownloadManager.enqueue", "Request for chmod", "Install application",
    },
}


def _on(vector, catalog):
    return {catalog[i].name for i in np.flatnonzero(vector)}


# ============================================================================
# MANIFEST
# ============================================================================

class TestManifest:
    def test_normalize_name(self):
        assert normalize_name("android.permission.SEND_SMS") == "SEND_SMS"
        assert normalize_name(" android.intent.category.HOME ") == "category.HOME"
        assert normalize_name("android.hardware.sensor.compass") == "sensor.compass"
        assert normalize_name("com.vendor.CUSTOM") == "com.vendor.CUSTOM"

    def test_routes_elements_and_dedups(self):
        doc = parse_manifest("""
            <manifest xmlns:android="http://schemas.android.com/apk/res/android">
              <uses-permission android:name="android.permission.INTERNET"/>
              <uses-permission android:name="android.permission.INTERNET"/>
              <uses-feature android:name="android.hardware.camera"/>
              <application><activity android:name=".Main"><intent-filter>
                <action android:name="android.intent.action.MAIN"/>
                <category android:name="android.intent.category.LAUNCHER"/>
              </intent-filter></activity></application>
            </manifest>""")
        assert doc == ManifestDoc(("INTERNET",), ("action.MAIN", "category.LAUNCHER"), ("camera",))

    def test_malformed_xml_reports_line(self):
        with pytest.raises(ParseError) as info:
            parse_manifest("<manifest>\n<uses-permission name='A'>\n</manifest>")
        assert info.value.line is not None

    def test_missing_name_attribute(self):
        with pytest.raises(ParseError, match="missing its name"):
            parse_manifest("<manifest><uses-permission/></manifest>")

    def test_serialize_round_trip(self):
        doc = ManifestDoc(("SEND_SMS", "INTERNET"), ("action.VIEW", "category.DEFAULT"), ("telephony",))
        assert parse_manifest(serialize_manifest(doc)) == doc


# ============================================================================
# SMALI-LITE
# ============================================================================

class TestSmali:
    def test_lite_syntax(self):
        unit = parse_smali(""".class Foo
.method run
    invoke SmsManager->getDefault
    const-string "content://sms"
.end method
""")
        (method,) = list(unit.iter_methods())
        assert unit.classes[0].class_name == "Foo"
        assert method.tokens == ("SmsManager.getDefault", "content://sms")

    def test_baksmali_syntax(self):
        unit = parse_smali(""".class public Lcom/a/B;
.method public go(I)V
    .registers 2
    const-string v0, "logcat"
    invoke-virtual {v0, v1}, Ljava/lang/Runtime;->exec(Ljava/lang/String;)Ljava/lang/Process;
    return-void
.end method
""")
        (method,) = list(unit.iter_methods())
        assert unit.classes[0].class_name == "B"
        assert method.method_name == "go"
        assert method.tokens == ("logcat", "Runtime.exec")

    @pytest.mark.parametrize("text, line", [
        (".method orphan\n.end method\n", 1),
        (".class A\n.method a\n.method b\n", 3),
        (".class A\n.end method\n", 2),
        (".class A\ninvoke X->y\n", 2),
        (".class A\n.method a\n    invoke not-a-call\n.end method\n", 3),
    ])
    def test_structure_errors(self, text, line):
        with pytest.raises(ParseError) as info:
            parse_smali(text)
        assert info.value.line == line

    def test_unterminated_method(self):
        with pytest.raises(ParseError, match="unterminated"):
            parse_smali(".class A\n.method a\n    invoke X->y\n")

    def test_serialize_round_trip(self):
        text = ".class A\n.method m\n    invoke Runtime->exec\n    const-string \"chmod 777\"\n.end method\n"
        unit = parse_smali(text)
        assert parse_smali(serialize_smali(unit)) == unit

    def test_literals_survive_a_round_trip(self):
        literals = ("Runtime.exec", 'say "hi"', "C:\\temp\\", "two\nlines", "tab\there", "sep\u2028x", "\\u0041")
        method = SmaliMethod("m", ("Runtime.exec",) + literals, frozenset(range(1, len(literals) + 1)))
        unit = SmaliUnit((SmaliClass("A", (method,)),))
        again = parse_smali(serialize_smali(unit))
        assert again == unit
        assert not again.classes[0].methods[0].is_literal(0)
        assert all(again.classes[0].methods[0].is_literal(i) for i in range(1, len(literals) + 1))

    def test_one_dot_literal_stays_a_literal(self):
        unit = parse_smali('.class A\n.method m\n    const-string "Runtime.exec"\n.end method\n')
        assert unit.classes[0].methods[0].literal_at == frozenset({0})
        assert 'const-string "Runtime.exec"' in serialize_smali(unit)
        assert "invoke" not in serialize_smali(unit)

    def test_baksmali_escapes_are_decoded(self):
        unit = parse_smali('.class A\n.method m\n    const-string v0, "a\\"b\\\\c"\n.end method\n')
        assert unit.classes[0].methods[0].tokens == ('a"b\\c',)


# ============================================================================
# SEQUENCE PATTERNS
# ============================================================================

class TestSequenceMatching:
    def test_expand_units(self):
        assert expand_units(["Runtime.exec", "chmod 777", "a.b.c"]) == ["Runtime", "exec", "chmod 777", "a.b.c"]

    def test_ordered_with_gaps(self):
        tokens = ["chmod 777", "Log.d", "Runtime.getRuntime", "Runtime.exec"]
        assert match_sequence(tokens, ["chmod 777", "Runtime", "getRuntime", "exec"])

    def test_order_matters(self):
        assert not match_sequence(["Runtime.exec", "logcat"], ["logcat", "Runtime", "exec"])

    def test_missing_unit(self):
        assert not match_sequence(["Runtime.exec"], ["logcat", "Runtime", "exec"])

    def test_empty_pattern_rejected(self):
        with pytest.raises(ValidationError):
            match_sequence(["a"], [])

    def test_pattern_file_parsing(self):
        patterns = parse_sequence_patterns("# c\nGet Logs\tlogcat\tRuntime\texec\n")
        assert patterns == {"Get Logs": ("logcat", "Runtime", "exec")}
        with pytest.raises(ParseError):
            parse_sequence_patterns("Get Logs\n")

    def test_every_shipped_sequence_feature_has_a_pattern(self, catalog):
        from app_parsers import default_patterns

        patterns = default_patterns()
        for feat in catalog:
            if not feat.kind.is_syntax:
                assert feat.name in patterns


# ============================================================================
# EXTRACTION
# ============================================================================

class TestExtraction:
    @pytest.mark.parametrize("app", sorted(EXPECTED))
    def test_bundled_apps(self, catalog, app):
        app_id, vector = extract_app_directory(APPS / app, catalog)
        assert app_id == app.split("/")[1]
        assert len(vector) == 195
        assert _on(vector, catalog) == EXPECTED[app]

    def test_missing_file(self, tmp_path, catalog):
        (tmp_path / "manifest.xml").write_text("<manifest/>")
        with pytest.raises(ValidationError, match="code.smali"):
            load_app(tmp_path)

    def test_extraction_uses_one_method_per_sequence(self, tiny_catalog, tmp_path):
        (tmp_path / "manifest.xml").write_text("<manifest/>")
        (tmp_path / "code.smali").write_text(
            ".class A\n.method a\n    const-string \"logcat\"\n.end method\n"
            ".method b\n    invoke Runtime->exec\n.end method\n")
        vector = extract_features(load_app(tmp_path), tiny_catalog)
        assert vector.sum() == 0

    @pytest.mark.parametrize("app", sorted(EXPECTED))
    def test_render_reproduces_vector(self, catalog, tmp_path, app):
        _, vector = extract_app_directory(APPS / app, catalog)
        rendered = write_app(render_app(vector, catalog, app_id="copy"), tmp_path / "copy")
        _, again = extract_app_directory(rendered, catalog)
        assert again.tolist() == vector.tolist()
