#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kgmod/common.hpp"

namespace kgmod::evalharness {

struct EvalItem {
  std::string statement;
  bool gold = false;
  std::string topic;
};

enum class TemplateId { truefalse_8shot, fever_8shot, custom };

// 8-shot statement-judging prompt. The preamble is a byte-frozen fixture; the
// statement under test is appended in the template's own
// "Statement: ... Your Judgement:" form.
struct PromptTemplate {
  TemplateId id;
  std::string name;
  std::string preamble;
  std::string positive;  // verdict string meaning "true"
  std::string negative;
  // fever-style templates keep the judgement marker on the line after the
  // statement; the others leave a blank line between
  bool adjacent_judgement = false;

  static const PromptTemplate& get(TemplateId id);
  static const PromptTemplate& by_name(const std::string& name);
  // further prompt styles load as fixtures: a plain-text preamble file plus
  // the two verdict strings
  static PromptTemplate from_fixture(const std::string& name, const std::string& path,
                                     std::string positive, std::string negative,
                                     bool adjacent_judgement = false);
};

std::string build_prompt(const PromptTemplate& tpl, const std::string& statement);

enum class Verdict { positive, negative, unparsable };

// First verdict word (quoted or bare, case-insensitive) after the final
// "Your Judgement:" marker decides; the whole generation is scanned when the
// marker is absent (generations usually exclude the prompt).
Verdict parse_verdict(const std::string& generation, const PromptTemplate& tpl);

struct EvalReport {
  std::string mode;  // "plain" or "with_kg"
  std::vector<std::pair<std::string, double>> topic_accuracy;  // first-appearance order
  double average = 0.0;  // mean of per-topic accuracies
  std::size_t items = 0;
  std::size_t unparsable = 0;  // counted as incorrect
  std::size_t failures = 0;    // model_fn errors, counted as incorrect
  std::size_t kg_vectors_used = 0;
  std::map<std::string, std::string> metadata;  // seed, model hashes, ...
};

// prompt + kg vectors -> generation; kg is empty in plain mode.
using ModelFn =
    std::function<std::string(const std::string&, const std::vector<std::vector<double>>&)>;
// statement -> kg vectors (typically text2graph::map_text or a gold lookup)
using KgProvider = std::function<std::vector<std::vector<double>>(const std::string&)>;

// kg_provider == nullptr runs plain mode and never invokes any provider.
EvalReport judge(const ModelFn& model_fn, std::span<const EvalItem> items,
                 const PromptTemplate& tpl, const KgProvider* kg_provider,
                 std::map<std::string, std::string> metadata = {});

// CSV with header columns statement,label,topic; label in {0,1}.
std::vector<EvalItem> load_truefalse(const std::string& path);

// JSONL records {"claim": ..., "label": "SUPPORTS"|"REFUTES"}; other labels
// are skipped and counted.
std::vector<EvalItem> load_fever(const std::string& path, std::size_t* skipped = nullptr);

const std::vector<std::string>& declared_topics();

std::string render_report(const EvalReport& report);
std::string report_json(const EvalReport& report);

}  // namespace kgmod::evalharness
