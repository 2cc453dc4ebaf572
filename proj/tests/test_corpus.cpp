#include <doctest.h>

#include <algorithm>

#include "kgmod/corpus.hpp"
#include "kgmod/rng.hpp"
#include "kgmod/serialize.hpp"
#include "kgmod/wikitext.hpp"
#include "support/tmpdir.hpp"

using namespace kgmod;
using corpus::AnnotatedDocument;
using corpus::ByteSpan;
using corpus::parse_wikitext;

namespace {

kgstore::TitleIndex patent_index() {
  return kgstore::TitleIndex::load(std::string(KGMOD_DATA_DIR) + "/fixtures/patent.titles.tsv");
}

std::string patent_source() {
  return read_file_text(std::string(KGMOD_DATA_DIR) + "/fixtures/patent-abstract.wiki");
}

}  // namespace

TEST_CASE("piped and unpiped links flatten with exact spans") {
  const auto piped = parse_wikitext("See [[United States patent law|patent law]].");
  CHECK(piped.text == "See patent law.");
  REQUIRE(piped.links.size() == 1);
  CHECK(piped.links[0].target_title == "United States patent law");
  CHECK(piped.links[0].anchor_text == "patent law");
  CHECK(piped.links[0].begin == 4);
  CHECK(piped.links[0].end == 14);

  const auto unpiped = parse_wikitext("[[Dracula]] is a book.");
  CHECK(unpiped.text == "Dracula is a book.");
  REQUIRE(unpiped.links.size() == 1);
  CHECK(unpiped.links[0].anchor_text == "Dracula");
  CHECK(unpiped.links[0].begin == 0);
  CHECK(unpiped.links[0].end == 7);
}

TEST_CASE("templates, html, quotes, comments, and headings strip away") {
  CHECK(parse_wikitext("a{{cite|x={{inner}}y}}b").text == "ab");
  CHECK(parse_wikitext("a<ref name=\"x\">note</ref>b").text == "anoteb");
  CHECK(parse_wikitext("a<br/>b<!-- gone -->c").text == "abc");
  CHECK(parse_wikitext("'''bold''' and ''italic''").text == "bold and italic");
  CHECK(parse_wikitext("'''''both'''''!").text == "both!");
  CHECK(parse_wikitext("== History ==\nbody").text == "History\nbody");
  CHECK(parse_wikitext("x = y < 3").text == "x = y < 3");  // bare '<' stays literal
}

TEST_CASE("unclosed constructs flag the document and emit the remainder literally") {
  const auto bad_link = parse_wikitext("before [[Broken and more text");
  CHECK(bad_link.malformed);
  CHECK(bad_link.links.empty());
  CHECK(bad_link.text == "before [[Broken and more text");
  CHECK_FALSE(bad_link.warnings.empty());

  const auto bad_tpl = parse_wikitext("before {{oops");
  CHECK(bad_tpl.malformed);
  CHECK(bad_tpl.text == "before {{oops");
}

TEST_CASE("parsing is total on arbitrary byte soup") {
  Rng rng(99);
  const std::string alphabet = "a[]{}|<>='#\n\tq ";
  for (int trial = 0; trial < 200; ++trial) {
    std::string soup;
    const std::size_t len = rng.below(120);
    for (std::size_t i = 0; i < len; ++i) soup.push_back(alphabet[rng.below(alphabet.size())]);
    const auto res = parse_wikitext(soup);  // must not crash
    for (const auto& link : res.links) {
      CHECK(res.text.substr(link.begin, link.end - link.begin) == link.anchor_text);
    }
  }
}

// Span fidelity over randomized generated wikitext: every link span slices
// back to its anchor text.
TEST_CASE("span fidelity holds on randomized generated wikitext") {
  Rng rng(4242);
  static const char* words[] = {"alpha", "beta", "gamma", "delta", "law", "city", "x"};
  for (int trial = 0; trial < 100; ++trial) {
    std::string src;
    std::vector<std::string> expect_anchor;
    const std::size_t parts = 1 + rng.below(12);
    for (std::size_t p = 0; p < parts; ++p) {
      switch (rng.below(6)) {
        case 0:
          src += words[rng.below(std::size(words))];
          src += " ";
          break;
        case 1: {
          const std::string t = words[rng.below(std::size(words))];
          src += "[[" + t + "]]";
          expect_anchor.push_back(t);
          break;
        }
        case 2: {
          const std::string t = words[rng.below(std::size(words))];
          const std::string a = words[rng.below(std::size(words))];
          src += "[[" + t + "|" + a + "]]";
          expect_anchor.push_back(a);
          break;
        }
        case 3:
          src += "{{tpl|" + std::string(words[rng.below(std::size(words))]) + "}}";
          break;
        case 4:
          src += "'''" + std::string(words[rng.below(std::size(words))]) + "'''";
          break;
        default:
          src += "<b>";
          break;
      }
    }
    const auto res = parse_wikitext(src);
    REQUIRE(res.links.size() == expect_anchor.size());
    for (std::size_t i = 0; i < res.links.size(); ++i) {
      const auto& link = res.links[i];
      CHECK(res.text.substr(link.begin, link.end - link.begin) == link.anchor_text);
      CHECK(link.anchor_text == expect_anchor[i]);
    }
  }
}

TEST_CASE("resolve_entities groups spans by qid and drops unmapped links") {
  const auto index = patent_index();
  std::vector<corpus::WikiLink> links = {
      {"United States patent law", "United States patent law", 10, 34},
      {"Nowhere", "nowhere", 36, 43},
      {"United States patent law", "the law", 50, 57},
  };
  std::size_t dropped = 0;
  const auto mentions = corpus::resolve_entities(links, index, &dropped);
  REQUIRE(mentions.size() == 1);
  CHECK(dropped == 1);
  CHECK(mentions[0].qid == "Q3039740");
  CHECK(mentions[0].spans == std::vector<ByteSpan>{{10, 34}, {50, 57}});
}

TEST_CASE("resolve_entities follows redirects from the 3-entry fixture index") {
  const auto index = patent_index();
  std::vector<corpus::WikiLink> links = {{"USPTO", "USPTO", 0, 5}};
  const auto mentions = corpus::resolve_entities(links, index);
  REQUIRE(mentions.size() == 1);
  CHECK(mentions[0].qid == "Q1459541");
}

TEST_CASE("annotate on the checked-in fixture reproduces the expected record") {
  const auto index = patent_index();
  const auto res = corpus::annotate("patent-abstract", patent_source(), index);
  CHECK(res.warnings.empty());
  REQUIRE(res.doc.mentions.size() == 2);
  CHECK(res.doc.mentions[0].qid == "Q3039740");
  CHECK(res.doc.mentions[0].spans == std::vector<ByteSpan>{{213, 237}, {263, 287}});
  CHECK(res.doc.mentions[1].qid == "Q1459541");
  CHECK(res.doc.mentions[1].spans == std::vector<ByteSpan>{{346, 387}});
  for (const auto& m : res.doc.mentions) {
    for (const auto& [b, e] : m.spans) {
      CHECK(res.doc.text.substr(b, e - b).find("United States") == 0);
    }
  }
  const std::string expected =
      read_file_text(std::string(KGMOD_DATA_DIR) + "/fixtures/patent.expected.jsonl");
  CHECK(corpus::to_json_line(res.doc) + "\n" == expected);

  // determinism: identical input gives byte-identical output
  const auto again = corpus::annotate("patent-abstract", patent_source(), index);
  CHECK(corpus::to_json_line(again.doc) == corpus::to_json_line(res.doc));
}

TEST_CASE("annotate with zero links yields an empty mention list") {
  kgstore::TitleIndex empty;
  const auto res = corpus::annotate("d", "Just plain text.", empty);
  CHECK(res.doc.mentions.empty());
  CHECK(res.doc.text == "Just plain text.");
}

TEST_CASE("record serialization roundtrips") {
  const auto index = patent_index();
  const auto doc = corpus::annotate("patent-abstract", patent_source(), index).doc;
  CHECK(corpus::from_json_line(corpus::to_json_line(doc)) == doc);

  CHECK_THROWS_AS(corpus::from_json_line("{not json"), FormatError);
  CHECK_THROWS_AS(
      corpus::from_json_line(R"({"doc_id":"x","text":"ab","entities":[{"qid":"Q1","spans":[[0,9]]}]})"),
      FormatError);  // span out of range
}

TEST_CASE("jsonl save/load preserves documents in order") {
  testsupport::TempDir tmp("jsonl");
  const auto index = patent_index();
  std::vector<AnnotatedDocument> docs = {
      corpus::annotate("a", "Hello [[United States patent law]].", index).doc,
      corpus::annotate("b", "No links here.", index).doc,
  };
  corpus::save_jsonl(tmp.path("docs.jsonl"), docs);
  CHECK(corpus::load_jsonl(tmp.path("docs.jsonl")) == docs);
}

TEST_CASE("corpus_stats matches hand-computed values") {
  AnnotatedDocument three_words;
  three_words.doc_id = "a";
  three_words.text = "one two three";

  SUBCASE("single doc hits the minima from the record format") {
    const auto s = corpus::corpus_stats({three_words});
    CHECK(s.num_texts == 1);
    CHECK(s.words_min == 3);
    CHECK(s.words_avg == 3);
    CHECK(s.entities_min == 0);
  }

  SUBCASE("average of 2 and 4 words is 3") {
    AnnotatedDocument two, four;
    two.text = "a b";
    four.text = "a b c d";
    const auto s = corpus::corpus_stats({two, four});
    CHECK(s.words_avg == 3);
    CHECK(s.words_min == 2);
    CHECK(s.words_max == 4);
  }

  SUBCASE("averages round half up") {
    AnnotatedDocument a, b;
    a.text = "w1 w2 w3";  // 3 words
    b.text = "w1 w2 w3 w4";
    const auto s = corpus::corpus_stats({a, b});  // mean 3.5 -> 4
    CHECK(s.words_avg == 4);
  }

  SUBCASE("empty corpus leaves aggregates unset") {
    const auto s = corpus::corpus_stats({});
    CHECK(s.num_texts == 0);
    CHECK_FALSE(s.words_avg.has_value());
    CHECK_FALSE(s.entities_max.has_value());
  }
}

TEST_CASE("annotate_all is order-stable across worker counts") {
  const auto index = patent_index();
  std::vector<corpus::SourceDocument> sources;
  for (int i = 0; i < 24; ++i) {
    sources.push_back({"d" + std::to_string(i),
                       "Doc " + std::to_string(i) + " cites [[United States patent law]]."});
  }
  const auto seq = corpus::annotate_all(sources, index, 1);
  const auto par = corpus::annotate_all(sources, index, 4);
  REQUIRE(seq.size() == par.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    CHECK(seq[i].doc == par[i].doc);
  }
}
