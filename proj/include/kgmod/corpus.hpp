#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kgmod/kgstore.hpp"
#include "kgmod/wikitext.hpp"

namespace kgmod::corpus {

using ByteSpan = std::pair<std::size_t, std::size_t>;  // half-open

// One entity with every place it is mentioned; spans sorted ascending.
struct EntityMention {
  std::string qid;
  std::vector<ByteSpan> spans;

  bool operator==(const EntityMention&) const = default;
};

struct AnnotatedDocument {
  std::string doc_id;
  std::string text;
  std::vector<EntityMention> mentions;  // ordered by first span start

  bool operator==(const AnnotatedDocument&) const = default;
};

// Groups resolved links by qid, merges and sorts spans. Links whose
// (redirect-resolved) title is absent from the index are dropped; the caller
// can count them via dropped_out.
std::vector<EntityMention> resolve_entities(const std::vector<WikiLink>& links,
                                            const kgstore::TitleIndex& index,
                                            std::size_t* dropped_out = nullptr);

struct AnnotateResult {
  AnnotatedDocument doc;
  std::vector<std::string> warnings;
  std::size_t dropped_links = 0;
};

AnnotateResult annotate(const std::string& doc_id, std::string_view source,
                        const kgstore::TitleIndex& index);

struct CorpusStats {
  std::size_t num_texts = 0;
  // integer presentation, averages rounded half-up; empty corpus leaves the
  // aggregates unset
  std::optional<std::uint64_t> words_avg, words_max, words_min;
  std::optional<std::uint64_t> entities_avg, entities_max, entities_min;
};

CorpusStats corpus_stats(const std::vector<AnnotatedDocument>& docs);
std::string render_stats(const CorpusStats& s);

// On-disk record: {"doc_id": ..., "text": ..., "entities":
// [{"qid": ..., "spans": [[start, end], ...]}, ...]}, one JSON object per
// line.
std::string to_json_line(const AnnotatedDocument& doc);
AnnotatedDocument from_json_line(const std::string& line);

void save_jsonl(const std::string& path, const std::vector<AnnotatedDocument>& docs);
std::vector<AnnotatedDocument> load_jsonl(const std::string& path);

// Raw input records for annotation runs: {"doc_id": ..., "source": ...}.
struct SourceDocument {
  std::string doc_id;
  std::string source;
};
std::vector<SourceDocument> load_source_jsonl(const std::string& path);

// Annotates documents on up to `threads` workers; output order matches input
// order regardless of scheduling.
std::vector<AnnotateResult> annotate_all(const std::vector<SourceDocument>& docs,
                                         const kgstore::TitleIndex& index,
                                         std::size_t threads = 1);

}  // namespace kgmod::corpus
