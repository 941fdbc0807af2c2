"""Refanging, rule-based extraction, and the hybrid merge, cross-checked
against the brute-force oracle in oracles.py."""

import random
import string

import pytest
from hypothesis import given, settings, strategies as st

from tstem.core import EntitySpan, Indicator, IndicatorType, validate_indicator
from tstem.extractor import (
    DefangGrammar,
    classify_token,
    domain_is_extractable,
    extract_indicators,
    is_routable_ipv4,
    merge_with_ner,
    refang,
    scan_candidates,
)

from .oracles import oracle_extract_keys, oracle_refang


class TestRefang:
    def test_bracket_dot(self):
        assert refang("http://88[.]119[.]169[.]53/") == "http://88.119.169.53/"

    def test_identity_on_plain_text(self):
        assert refang("plain text, no iocs") == "plain text, no iocs"

    def test_mixed_tokens(self):
        assert refang("hxxps://evil[dot]example[.]com") == "https://evil.example.com"

    def test_at_and_colon_tokens(self):
        assert refang("user[at]corp(dot)net on hxxp[:]//x.io") == \
            "user@corp.net on http://x.io"

    def test_case_insensitive(self):
        assert refang("HXXP://a[DOT]b[.]CoM") == "http://a.b.CoM"

    @given(st.text(alphabet=string.printable, max_size=300))
    def test_matches_literal_rewriter(self, text):
        assert refang(text) == oracle_refang(text)

    @given(st.lists(st.sampled_from(
        ["[.]", "(.)", "[dot]", "(dot)", "hxxp", "hxxps", "[:]", "[at]", "(at)",
         "evil", ".", "x", " ", "com", "http"]), max_size=30))
    def test_idempotent(self, parts):
        text = "".join(parts)
        assert refang(refang(text)) == refang(text)

    def test_override_grammar_file(self, tmp_path):
        path = tmp_path / "rules.tsv"
        path.write_text("# custom\n\\[punto\\]\t.\n")
        grammar = DefangGrammar.load(str(path))
        assert refang("a[punto]com", grammar) == "a.com"
        assert refang("a[.]com", grammar) == "a[.]com"  # default rules replaced


class TestClassifyToken:
    def test_sha1_by_length(self):
        assert classify_token("a95dad9c3d1b4b2b4ad6fd05961a1a3957500b2d") is IndicatorType.SHA1

    def test_md5_and_sha256_by_length(self):
        assert classify_token("d282e137db2d55ae8fd3a299136f277e") is IndicatorType.MD5
        assert classify_token("cd09bf437f46210521ad5c21891414f236e29aa6869906820c7c9dc2b565d8be") \
            is IndicatorType.SHA256

    def test_domain_sample(self):
        assert classify_token("expiredaccessreviewnow.com") is IndicatorType.DOMAIN

    def test_plain_word_is_none(self):
        assert classify_token("hello") is None

    def test_precedence_ipv4_over_domain(self):
        assert classify_token("1.2.3.4") is IndicatorType.IPV4

    def test_url_over_domain(self):
        assert classify_token("http://evil.com/") is IndicatorType.URL

    def test_email_over_domain(self):
        assert classify_token("a@evil.com") is IndicatorType.EMAIL

    def test_filename_not_domain(self):
        assert classify_token("setup.exe") is None


class TestDomainAllowlist:
    def test_exe_suppressed(self):
        assert not domain_is_extractable("setup.exe")

    def test_onion_allowed(self):
        assert domain_is_extractable("abcdefgh.onion")

    def test_shortener_allowed(self):
        assert domain_is_extractable("t.co")


class TestRoutability:
    @pytest.mark.parametrize("value", ["10.0.0.1", "192.168.1.1", "127.0.0.1",
                                       "172.16.0.1", "169.254.0.1"])
    def test_private_flagged(self, value):
        assert not is_routable_ipv4(value)

    @pytest.mark.parametrize("value", ["8.8.8.8", "193.38.55.43", "172.15.0.1",
                                       "172.32.0.1"])
    def test_public_routable(self, value):
        assert is_routable_ipv4(value)

    def test_private_still_extracted(self):
        out = extract_indicators("internal C2 at 10.0.0.5")
        assert [i.value for i in out] == ["10.0.0.5"]


class TestExtractIndicators:
    def test_url_and_hash_in_order(self):
        text = "C2 at http://157.90.132.182/ drops d282e137db2d55ae8fd3a299136f277e"
        out = extract_indicators(text)
        assert [i.key for i in out] == [
            "url:http://157.90.132.182/",
            "md5:d282e137db2d55ae8fd3a299136f277e",
        ]

    def test_empty_text(self):
        assert extract_indicators("") == []

    def test_defanged_url_refangs(self):
        out = extract_indicators("see hxxp://88[.]119[.]169[.]53/mal.php")
        assert out[0].key == "url:http://88.119.169.53/mal.php"

    def test_dedup_by_key(self):
        out = extract_indicators("1.2.3.4 seen again 1.2.3.4 and 01.2.3.4")
        assert [i.key for i in out] == ["ipv4:1.2.3.4"]

    def test_planted_mixed_kinds(self):
        planted = [
            ("url:http://193.38.55.43/", "hxxp://193[.]38[.]55[.]43/"),
            ("domain:expiredaccessreviewnow.com", "expiredaccessreviewnow[.]com"),
            ("md5:d282e137db2d55ae8fd3a299136f277e", "d282e137db2d55ae8fd3a299136f277e"),
            ("sha1:a95dad9c3d1b4b2b4ad6fd05961a1a3957500b2d",
             "a95dad9c3d1b4b2b4ad6fd05961a1a3957500b2d"),
            ("ipv4:45.9.74.32", "45.9.74[.]32"),
            ("cve:CVE-2021-44228", "CVE-2021-44228"),
            ("email:ops@evil.net", "ops[at]evil[dot]net"),
        ]
        filler = " the quick brown fox jumped over the lazy dog again and again "
        text = filler.join(form for _, form in planted)
        text = (filler * 3) + text + (filler * 3)
        assert [i.key for i in extract_indicators(text)] == [k for k, _ in planted]

    def test_no_domain_inside_url(self):
        out = extract_indicators("visit http://evil.com/path now")
        assert [i.kind for i in out] == [IndicatorType.URL]

    def test_sentence_final_dot_not_part_of_value(self):
        out = extract_indicators("The C2 is 193.38.55.43. It is down.")
        assert [i.key for i in out] == ["ipv4:193.38.55.43"]

    def test_ipv6(self):
        out = extract_indicators("listener on 2001:db8::1 port 443")
        assert [i.key for i in out] == ["ipv6:2001:db8::1"]

    @settings(max_examples=60, deadline=None)
    @given(st.text(alphabet=string.ascii_letters + string.digits +
                   ".:-@%+_[]()/ \n\"'<>,;!?", max_size=400))
    def test_every_output_validates(self, text):
        for ind in extract_indicators(text):
            assert validate_indicator(ind.value, ind.kind) == []

    def test_oracle_equivalence_adversarial(self):
        vocab = [
            "evil.com.", "evil.com..", "evil.com..x", ".evil.com", "-evil.com",
            "a@b.com@c.com", "@evil.com", "evil.com@", "x..y@a.com",
            "1.2.3.4.5", "999.1.1.1", "::ffff:1.2.3.4", "::1..", "12:30",
            "http://http://x", "xhttp://a.com", "http://a.com,evil.com",
            "deadbeef" * 4 + "x", "CVE-2021-44228x", "setup.exe", "t.co",
            "hxxps://bad[.]example[.]com/p?q=1", "user(at)evil[dot]com",
            "plain", "words", "..", "a.b.c:80",
        ]
        rng = random.Random(1)
        seps = [" ", ", ", ". ", "\n", " (", ") ", ' "', ": "]
        for _ in range(150):
            text = "".join(rng.choice(vocab) + rng.choice(seps)
                           for _ in range(rng.randint(1, 60)))
            got = [i.key for i in extract_indicators(text)]
            assert got == oracle_extract_keys(text), text


class TestScanCandidates:
    def test_positions_sorted(self):
        text = "b.com then 1.2.3.4 then a.org"
        positions = [pos for pos, _, _ in scan_candidates(text)]
        assert positions == sorted(positions)


class TestMergeWithNer:
    def test_union_adds_new_indicator(self):
        text = "from http://a.com/x and 198.51.100.7"
        rules = extract_indicators("from http://a.com/x")
        spans = [EntitySpan(label="Indicator", start=24, end=36, text="198.51.100.7")]
        merged = merge_with_ner(rules, spans, text)
        assert [i.key for i in merged.indicators] == \
            ["url:http://a.com/x", "ipv4:198.51.100.7"]

    def test_empty_inputs(self):
        merged = merge_with_ner([], [], "")
        assert merged.indicators == [] and merged.context_tags == []

    def test_dedup_against_rules(self):
        value = "d282e137db2d55ae8fd3a299136f277e"
        rules = [Indicator(value=value, kind=IndicatorType.MD5)]
        spans = [EntitySpan(label="Indicator", start=0, end=32, text=value)]
        merged = merge_with_ner(rules, spans, value)
        assert len(merged.indicators) == 1

    def test_other_labels_become_context_tags(self):
        text = "Emotet is active"
        spans = [EntitySpan(label="Malware", start=0, end=6, text="Emotet")]
        merged = merge_with_ner([], spans, text)
        assert merged.indicators == []
        assert merged.context_tags == [("Malware", "Emotet")]

    def test_invalid_span_dropped_with_counter(self):
        text = "garbage zzz"
        spans = [EntitySpan(label="Indicator", start=8, end=11, text="zzz")]
        merged = merge_with_ner([], spans, text)
        assert merged.indicators == [] and merged.invalid_dropped == 1

    def test_never_removes_rule_output(self):
        text = "1.2.3.4 and evil.com"
        rules = extract_indicators(text)
        spans = [EntitySpan(label="Indicator", start=0, end=7, text="1.2.3.4")]
        merged = merge_with_ner(rules, spans, text)
        assert set(rules) <= set(merged.indicators)

    def test_defanged_span_refanged(self):
        text = "seen at bad[.]host[.]com today"
        spans = [EntitySpan(label="Indicator", start=8, end=25, text="bad[.]host[.]com")]
        merged = merge_with_ner([], spans, text)
        assert [i.key for i in merged.indicators] == ["domain:bad.host.com"]
