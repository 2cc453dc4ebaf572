#include "kgmod/kgstore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kgmod/serialize.hpp"

namespace kgmod::kgstore {

namespace {
constexpr int kMaxRedirectHops = 8;
constexpr char kTableMagic[4] = {'K', 'G', 'E', '1'};

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

bool looks_like_qid(const std::string& s) {
  if (s.size() < 2 || s[0] != 'Q') return false;
  return std::all_of(s.begin() + 1, s.end(),
                     [](unsigned char c) { return c >= '0' && c <= '9'; });
}

void TitleIndex::add_title(const std::string& title, const std::string& qid) {
  if (!looks_like_qid(qid)) {
    throw FormatError("not a qid: '" + qid + "' for title '" + title + "'");
  }
  titles_[title] = qid;
  qids_.insert(qid);
}

void TitleIndex::add_redirect(const std::string& title, const std::string& canonical) {
  redirects_[title] = canonical;
}

std::optional<std::string> TitleIndex::resolve(const std::string& title) const {
  const std::string* cur = &title;
  for (int hop = 0; hop <= kMaxRedirectHops; ++hop) {
    auto direct = titles_.find(*cur);
    if (direct != titles_.end()) return direct->second;
    auto redir = redirects_.find(*cur);
    if (redir == redirects_.end()) return std::nullopt;
    cur = &redir->second;
  }
  return std::nullopt;  // chain too long or cyclic
}

bool TitleIndex::has_qid(const std::string& qid) const { return qids_.count(qid) != 0; }

TitleIndex TitleIndex::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open title index: " + path);
  TitleIndex idx;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() == 2) {
      if (!looks_like_qid(fields[1])) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": not a qid: '" +
                          fields[1] + "'");
      }
      idx.add_title(fields[0], fields[1]);
    } else if (fields.size() == 3 && fields[1] == "@") {
      idx.add_redirect(fields[0], fields[2]);
    } else {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected 'title<TAB>qid' or 'title<TAB>@<TAB>canonical'");
    }
  }
  return idx;
}

void TitleIndex::save(const std::string& path) const {
  std::ostringstream out;
  for (const auto& [title, qid] : titles_) out << title << '\t' << qid << '\n';
  for (const auto& [title, canonical] : redirects_) {
    out << title << "\t@\t" << canonical << '\n';
  }
  write_file_text(path, out.str());
}

void EntityEmbeddingTable::put(const std::string& qid, std::vector<double> vec) {
  if (dim_ == 0) dim_ = vec.size();
  if (vec.size() != dim_) {
    throw ShapeError("embedding for " + qid + " has length " + std::to_string(vec.size()) +
                     ", table dim is " + std::to_string(dim_));
  }
  for (double v : vec) {
    if (!std::isfinite(v)) throw NumericError("non-finite embedding for " + qid);
  }
  entries_[qid] = std::move(vec);
}

const std::vector<double>& EntityEmbeddingTable::get(const std::string& qid) const {
  auto it = entries_.find(qid);
  if (it == entries_.end()) throw LookupError("lookup miss: " + qid);
  return it->second;
}

std::vector<std::uint8_t> EntityEmbeddingTable::serialize() const {
  ByteWriter w;
  w.bytes(kTableMagic, 4);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u64(entries_.size());
  for (const auto& [qid, vec] : entries_) {
    w.str16(qid);
    w.f64_span(vec.data(), vec.size());
  }
  return w.take();
}

EntityEmbeddingTable EntityEmbeddingTable::deserialize(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.raw_into(magic, 4);
  if (std::string_view(magic, 4) != std::string_view(kTableMagic, 4)) {
    throw FormatError("bad magic for embedding table (offset 0)");
  }
  EntityEmbeddingTable t;
  t.dim_ = r.u32();
  if (t.dim_ == 0) throw FormatError("embedding table dim is 0 (offset 4)");
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string qid = r.str16();
    std::vector<double> vec(t.dim_);
    r.f64_into(vec.data(), vec.size());
    t.entries_[qid] = std::move(vec);
  }
  r.expect_end("embedding table");
  if (t.entries_.size() != count) {
    throw FormatError("embedding table has duplicate qids");
  }
  return t;
}

void EntityEmbeddingTable::save(const std::string& path) const {
  write_file_bytes(path, serialize());
}

EntityEmbeddingTable EntityEmbeddingTable::load(const std::string& path) {
  return deserialize(read_file_bytes(path));
}

std::vector<std::pair<std::string, double>> EntityEmbeddingTable::nearest(
    const std::vector<double>& query, std::size_t k) const {
  if (query.size() != dim_) {
    throw ShapeError("query length " + std::to_string(query.size()) +
                     " does not match table dim " + std::to_string(dim_));
  }
  if (k < 1 || k > entries_.size()) {
    throw ShapeError("k = " + std::to_string(k) + " out of range for table of " +
                     std::to_string(entries_.size()));
  }
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(entries_.size());
  for (const auto& [qid, vec] : entries_) {
    double s = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) {
      const double d = vec[i] - query[i];
      s += d * d;
    }
    scored.emplace_back(qid, std::sqrt(s));
  }
  std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(k), scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.second != b.second) return a.second < b.second;
                      return a.first < b.first;
                    });
  scored.resize(k);
  return scored;
}

std::string TripleStore::key(const Triple& t) {
  return t.head + '\t' + t.relation + '\t' + t.tail;
}

void TripleStore::add(Triple t) {
  if (!seen_.insert(key(t)).second) return;
  if (entity_ids_.emplace(t.head, entities_.size()).second) entities_.push_back(t.head);
  if (entity_ids_.emplace(t.tail, entities_.size()).second) entities_.push_back(t.tail);
  if (relation_ids_.emplace(t.relation, relations_.size()).second) {
    relations_.push_back(t.relation);
  }
  triples_.push_back(std::move(t));
}

bool TripleStore::contains(const Triple& t) const { return seen_.count(key(t)) != 0; }

std::size_t TripleStore::entity_id(const std::string& qid) const {
  auto it = entity_ids_.find(qid);
  if (it == entity_ids_.end()) throw LookupError("unknown entity: " + qid);
  return it->second;
}

std::size_t TripleStore::relation_id(const std::string& rel) const {
  auto it = relation_ids_.find(rel);
  if (it == relation_ids_.end()) throw LookupError("unknown relation: " + rel);
  return it->second;
}

TripleStore TripleStore::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open triples: " + path);
  TripleStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": expected 'head<TAB>relation<TAB>tail'");
    }
    store.add(Triple{fields[0], fields[1], fields[2]});
  }
  return store;
}

void TripleStore::save(const std::string& path) const {
  std::ostringstream out;
  for (const Triple& t : triples_) {
    out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  }
  write_file_text(path, out.str());
}

}  // namespace kgmod::kgstore
