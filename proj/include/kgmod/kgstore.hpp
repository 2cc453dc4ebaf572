#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kgmod/common.hpp"

namespace kgmod::kgstore {

// title -> qid map with redirect resolution (<= 8 hops, cycle-safe).
// Loaded from TSV: "title<TAB>qid" entries and "title<TAB>@<TAB>canonical"
// redirects.
class TitleIndex {
 public:
  void add_title(const std::string& title, const std::string& qid);
  void add_redirect(const std::string& title, const std::string& canonical);

  // Follows redirects; nullopt when the chain dead-ends, loops, or exceeds
  // the hop budget.
  std::optional<std::string> resolve(const std::string& title) const;
  bool has_qid(const std::string& qid) const;
  std::size_t size() const { return titles_.size(); }

  static TitleIndex load(const std::string& path);
  void save(const std::string& path) const;

 private:
  std::map<std::string, std::string> titles_;
  std::map<std::string, std::string> redirects_;
  std::unordered_set<std::string> qids_;
};

bool looks_like_qid(const std::string& s);

// qid -> fixed-dimension embedding. Deterministic iteration (sorted by qid)
// so persisted bytes are stable.
class EntityEmbeddingTable {
 public:
  EntityEmbeddingTable() = default;
  explicit EntityEmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& qid) const { return entries_.count(qid) != 0; }

  void put(const std::string& qid, std::vector<double> vec);
  // Missing qid raises a lookup-miss carrying the qid.
  const std::vector<double>& get(const std::string& qid) const;

  const std::map<std::string, std::vector<double>>& entries() const { return entries_; }

  // Binary format: magic "KGE1", u32 dim, u64 count, then per entry
  // (sorted by qid): u16 qid length, qid bytes, dim f64 little-endian.
  void save(const std::string& path) const;
  static EntityEmbeddingTable load(const std::string& path);
  std::vector<std::uint8_t> serialize() const;
  static EntityEmbeddingTable deserialize(const std::vector<std::uint8_t>& bytes);

  // Exact Euclidean nearest neighbors, ascending distance, ties broken by qid.
  std::vector<std::pair<std::string, double>> nearest(const std::vector<double>& query,
                                                      std::size_t k) const;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>> entries_;
};

struct Triple {
  std::string head;
  std::string relation;
  std::string tail;

  bool operator==(const Triple& o) const = default;
};

// Triples plus entity/relation vocabularies in first-appearance order and an
// exact membership test.
class TripleStore {
 public:
  void add(Triple t);
  bool contains(const Triple& t) const;
  const std::vector<Triple>& triples() const { return triples_; }
  const std::vector<std::string>& entities() const { return entities_; }
  const std::vector<std::string>& relations() const { return relations_; }
  std::size_t entity_id(const std::string& qid) const;
  std::size_t relation_id(const std::string& rel) const;
  bool has_entity(const std::string& qid) const { return entity_ids_.count(qid) != 0; }

  // TSV "head<TAB>relation<TAB>tail"; exact duplicates dropped.
  static TripleStore load(const std::string& path);
  void save(const std::string& path) const;

 private:
  static std::string key(const Triple& t);

  std::vector<Triple> triples_;
  std::unordered_set<std::string> seen_;
  std::vector<std::string> entities_, relations_;
  std::unordered_map<std::string, std::size_t> entity_ids_, relation_ids_;
};

}  // namespace kgmod::kgstore
