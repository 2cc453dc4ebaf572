#include "kgmod/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "kgmod/serialize.hpp"
#include "kgmod/tokenize.hpp"

namespace kgmod::corpus {

using ordered_json = nlohmann::ordered_json;

std::vector<EntityMention> resolve_entities(const std::vector<WikiLink>& links,
                                            const kgstore::TitleIndex& index,
                                            std::size_t* dropped_out) {
  std::map<std::string, std::vector<ByteSpan>> by_qid;
  std::size_t dropped = 0;
  for (const WikiLink& link : links) {
    const auto qid = index.resolve(link.target_title);
    if (!qid) {
      ++dropped;
      continue;
    }
    by_qid[*qid].emplace_back(link.begin, link.end);
  }
  std::vector<EntityMention> mentions;
  mentions.reserve(by_qid.size());
  for (auto& [qid, spans] : by_qid) {
    std::sort(spans.begin(), spans.end());
    spans.erase(std::unique(spans.begin(), spans.end()), spans.end());
    mentions.push_back(EntityMention{qid, std::move(spans)});
  }
  if (dropped_out) *dropped_out = dropped;
  return mentions;
}

AnnotateResult annotate(const std::string& doc_id, std::string_view source,
                        const kgstore::TitleIndex& index) {
  AnnotateResult out;
  ParseResult parsed = parse_wikitext(source);
  out.warnings = std::move(parsed.warnings);
  out.doc.doc_id = doc_id;
  out.doc.text = std::move(parsed.text);
  out.doc.mentions = resolve_entities(parsed.links, index, &out.dropped_links);
  std::sort(out.doc.mentions.begin(), out.doc.mentions.end(),
            [](const EntityMention& a, const EntityMention& b) {
              if (a.spans.front() != b.spans.front()) return a.spans.front() < b.spans.front();
              return a.qid < b.qid;
            });
  return out;
}

namespace {

std::uint64_t round_half_up(std::uint64_t sum, std::uint64_t count) {
  return (2 * sum + count) / (2 * count);
}

}  // namespace

CorpusStats corpus_stats(const std::vector<AnnotatedDocument>& docs) {
  CorpusStats s;
  s.num_texts = docs.size();
  if (docs.empty()) return s;
  std::uint64_t wsum = 0, wmax = 0, wmin = UINT64_MAX;
  std::uint64_t esum = 0, emax = 0, emin = UINT64_MAX;
  for (const auto& d : docs) {
    const std::uint64_t words = whitespace_word_count(d.text);
    const std::uint64_t ents = d.mentions.size();  // one mention per distinct qid
    wsum += words;
    wmax = std::max(wmax, words);
    wmin = std::min(wmin, words);
    esum += ents;
    emax = std::max(emax, ents);
    emin = std::min(emin, ents);
  }
  s.words_avg = round_half_up(wsum, docs.size());
  s.words_max = wmax;
  s.words_min = wmin;
  s.entities_avg = round_half_up(esum, docs.size());
  s.entities_max = emax;
  s.entities_min = emin;
  return s;
}

std::string render_stats(const CorpusStats& s) {
  std::ostringstream out;
  out << "number of texts\t" << s.num_texts << "\n";
  auto line = [&](const char* label, const std::optional<std::uint64_t>& v) {
    out << label << "\t" << (v ? std::to_string(*v) : "n/a") << "\n";
  };
  line("words avg", s.words_avg);
  line("words max", s.words_max);
  line("words min", s.words_min);
  line("unique entities avg", s.entities_avg);
  line("unique entities max", s.entities_max);
  line("unique entities min", s.entities_min);
  return out.str();
}

std::string to_json_line(const AnnotatedDocument& doc) {
  ordered_json j;
  j["doc_id"] = doc.doc_id;
  j["text"] = doc.text;
  ordered_json entities = ordered_json::array();
  for (const EntityMention& m : doc.mentions) {
    ordered_json e;
    e["qid"] = m.qid;
    ordered_json spans = ordered_json::array();
    for (const auto& [b, en] : m.spans) spans.push_back({b, en});
    e["spans"] = std::move(spans);
    entities.push_back(std::move(e));
  }
  j["entities"] = std::move(entities);
  return j.dump();
}

AnnotatedDocument from_json_line(const std::string& line) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad annotated record: ") + e.what());
  }
  AnnotatedDocument doc;
  try {
    doc.doc_id = j.at("doc_id").get<std::string>();
    doc.text = j.at("text").get<std::string>();
    for (const auto& e : j.at("entities")) {
      EntityMention m;
      m.qid = e.at("qid").get<std::string>();
      for (const auto& sp : e.at("spans")) {
        if (!sp.is_array() || sp.size() != 2) throw FormatError("span must be [start, end]");
        m.spans.emplace_back(sp[0].get<std::size_t>(), sp[1].get<std::size_t>());
      }
      if (m.spans.empty()) throw FormatError("mention without spans");
      doc.mentions.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad annotated record: ") + e.what());
  }
  for (const EntityMention& m : doc.mentions) {
    for (const auto& [b, en] : m.spans) {
      if (b >= en || en > doc.text.size()) {
        throw FormatError("span out of range in record " + doc.doc_id);
      }
    }
  }
  return doc;
}

void save_jsonl(const std::string& path, const std::vector<AnnotatedDocument>& docs) {
  std::ostringstream out;
  for (const auto& d : docs) out << to_json_line(d) << '\n';
  write_file_text(path, out.str());
}

std::vector<AnnotatedDocument> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open annotated corpus: " + path);
  std::vector<AnnotatedDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      docs.push_back(from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

std::vector<SourceDocument> load_source_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open source records: " + path);
  std::vector<SourceDocument> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = ordered_json::parse(line);
      docs.push_back(SourceDocument{j.at("doc_id").get<std::string>(),
                                    j.at("source").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

std::vector<AnnotateResult> annotate_all(const std::vector<SourceDocument>& docs,
                                         const kgstore::TitleIndex& index,
                                         std::size_t threads) {
  std::vector<AnnotateResult> results(docs.size());
  if (threads <= 1 || docs.size() < 2) {
    for (std::size_t i = 0; i < docs.size(); ++i) {
      results[i] = annotate(docs[i].doc_id, docs[i].source, index);
    }
    return results;
  }
  const std::size_t workers = std::min(threads, docs.size());
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<std::size_t> next{0};
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= docs.size()) return;
        results[i] = annotate(docs[i].doc_id, docs[i].source, index);
      }
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

}  // namespace kgmod::corpus
