#include "kgmod/evalharness.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kgmod/serialize.hpp"

namespace kgmod::evalharness {

namespace {

// Stock 8-shot preambles, frozen byte-for-byte (including the irregular
// grammar of the opening sentence and the uneven trailing periods).
const std::string kTrueFalsePreamble =
    "I want you act as an statement judge. Given a statement, your objective is to "
    "determine if the provided statement correct or not. Write \"True\" if the given "
    "statement is true and \"False\" if given statement is false. The answer you give "
    "MUST be \"True\" or \"False\".\n"
    "\n"
    "For example:\n"
    "\n"
    "Statement: Marlon Brando refused to be in any films in 1972.\n"
    "\n"
    "Your Judgement: \"False\"\n"
    "\n"
    "Statement: Dracula is a written work.\n"
    "\n"
    "Your Judgement: \"True\"\n"
    "\n"
    "Statement: Maria Sharapova passed all drug tests at the 2016 Australian Open.\n"
    "\n"
    "Your Judgement: \"False\"\n"
    "\n"
    "Statement: Blood are red.\n"
    "\n"
    "Your Judgement: \"True\".\n"
    "\n"
    "Statement: David Cronenberg has a cameo in To Die For.\n"
    "\n"
    "Your Judgement: \"True\".\n"
    "\n"
    "Statement: Albert Einstein was born in Moscow.\n"
    "\n"
    "Your Judgement: \"False\".\n"
    "\n"
    "Statement: Cubango is a city in Australia.\n"
    "\n"
    "Your Judgement: \"False\".\n"
    "\n"
    "Statement: The Okavango River is a river in southwest Africa.\n"
    "\n"
    "Your Judgement: \"True\".\n";

const std::string kFeverPreamble =
    "I want you act as an statement judge. Given a statement, your objective is to "
    "determine if the provided statement correct or not. Write \"SUPPORTS\" if the given "
    "statement is true and \"REFUTES\" if given statement is false. The answer you give "
    "MUST be \"SUPPORTS\" or \"REFUTES\".\n"
    "\n"
    "For example:\n"
    "\n"
    "Statement: Furia is adapted from Graffiti and it is French.\n"
    "Your Judgement: \"SUPPORTS\"\n"
    "\n"
    "Statement: Prince (musician) was not backed by the New Power Generation.\n"
    "Your Judgement: \"REFUTES\"\n"
    "\n"
    "Statement: Ronin is a 2001 film.\n"
    "Your Judgement: \"REFUTES\"\n"
    "\n"
    "Statement: The 1998 NFL Draft was cancelled April 18 -- 19.\n"
    "Your Judgement: \"REFUTES\"\n"
    "\n"
    "Statement: Usher's sophomore single is My Way.\n"
    "Your Judgement: \"REFUTES\"\n"
    "\n"
    "Statement: Anna Kendrick made her film debut in Camp.\n"
    "Your Judgement: \"SUPPORTS\"\n"
    "\n"
    "Statement: The G1 Climax is held each March.\n"
    "Your Judgement: \"REFUTES\"\n"
    "\n"
    "Statement: Loving was directed by Michael Shannon.\n"
    "Your Judgement: \"REFUTES\"\n";

const PromptTemplate kTrueFalse{TemplateId::truefalse_8shot, "truefalse_8shot",
                                kTrueFalsePreamble, "True", "False",
                                /*adjacent_judgement=*/false};
const PromptTemplate kFever{TemplateId::fever_8shot, "fever_8shot", kFeverPreamble,
                            "SUPPORTS", "REFUTES", /*adjacent_judgement=*/true};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool word_boundary(const std::string& hay, std::size_t pos, std::size_t len) {
  auto is_word = [](unsigned char c) { return std::isalnum(c) != 0; };
  if (pos > 0 && is_word(hay[pos - 1])) return false;
  if (pos + len < hay.size() && is_word(hay[pos + len])) return false;
  return true;
}

// first whole-word occurrence at or after `from`, npos when absent
std::size_t find_word(const std::string& hay, const std::string& needle, std::size_t from) {
  std::size_t pos = from;
  while ((pos = hay.find(needle, pos)) != std::string::npos) {
    if (word_boundary(hay, pos, needle.size())) return pos;
    ++pos;
  }
  return std::string::npos;
}

}  // namespace

const PromptTemplate& PromptTemplate::get(TemplateId id) {
  return id == TemplateId::truefalse_8shot ? kTrueFalse : kFever;
}

const PromptTemplate& PromptTemplate::by_name(const std::string& name) {
  if (name == kTrueFalse.name) return kTrueFalse;
  if (name == kFever.name) return kFever;
  throw ConfigError("unknown prompt template: " + name);
}

PromptTemplate PromptTemplate::from_fixture(const std::string& name, const std::string& path,
                                            std::string positive, std::string negative,
                                            bool adjacent_judgement) {
  if (positive.empty() || negative.empty() || positive == negative) {
    throw ConfigError("prompt template needs two distinct verdict strings");
  }
  return PromptTemplate{TemplateId::custom, name, read_file_text(path),
                        std::move(positive), std::move(negative), adjacent_judgement};
}

std::string build_prompt(const PromptTemplate& tpl, const std::string& statement) {
  std::string out = tpl.preamble;
  out += "\nStatement: ";
  out += statement;
  // the appended slot mirrors each template's own shot layout
  out += tpl.adjacent_judgement ? "\nYour Judgement:" : "\n\nYour Judgement:";
  return out;
}

Verdict parse_verdict(const std::string& generation, const PromptTemplate& tpl) {
  const std::string hay = lower(generation);
  static const std::string marker = "your judgement:";
  const std::size_t mark = hay.rfind(marker);
  const std::size_t from = mark == std::string::npos ? 0 : mark + marker.size();
  const std::size_t pos_at = find_word(hay, lower(tpl.positive), from);
  const std::size_t neg_at = find_word(hay, lower(tpl.negative), from);
  if (pos_at == std::string::npos && neg_at == std::string::npos) return Verdict::unparsable;
  if (neg_at == std::string::npos) return Verdict::positive;
  if (pos_at == std::string::npos) return Verdict::negative;
  return pos_at < neg_at ? Verdict::positive : Verdict::negative;
}

EvalReport judge(const ModelFn& model_fn, std::span<const EvalItem> items,
                 const PromptTemplate& tpl, const KgProvider* kg_provider,
                 std::map<std::string, std::string> metadata) {
  if (items.empty()) throw ShapeError("judge needs at least one item");
  EvalReport report;
  report.mode = kg_provider ? "with_kg" : "plain";
  report.items = items.size();
  report.metadata = std::move(metadata);

  std::vector<std::string> topic_order;
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_topic;  // correct, total
  const std::vector<std::vector<double>> no_kg;

  for (const EvalItem& item : items) {
    if (per_topic.find(item.topic) == per_topic.end()) topic_order.push_back(item.topic);
    auto& [correct, total] = per_topic[item.topic];
    ++total;

    std::vector<std::vector<double>> kg;
    if (kg_provider) {
      kg = (*kg_provider)(item.statement);
      report.kg_vectors_used += kg.size();
    }
    const std::string prompt = build_prompt(tpl, item.statement);
    std::string generation;
    bool failed = false;
    try {
      generation = model_fn(prompt, kg_provider ? kg : no_kg);
    } catch (const std::exception&) {
      failed = true;
      ++report.failures;
    }
    if (failed) continue;  // recorded, run continues

    const Verdict v = parse_verdict(generation, tpl);
    if (v == Verdict::unparsable) {
      ++report.unparsable;  // strict: scores as incorrect
      continue;
    }
    const bool predicted = v == Verdict::positive;
    if (predicted == item.gold) ++correct;
  }

  double sum = 0.0;
  for (const std::string& topic : topic_order) {
    const auto& [correct, total] = per_topic[topic];
    const double acc = static_cast<double>(correct) / static_cast<double>(total);
    report.topic_accuracy.emplace_back(topic, acc);
    sum += acc;
  }
  report.average = sum / static_cast<double>(topic_order.size());
  return report;
}

namespace {

// minimal CSV with double-quote quoting and "" escapes
std::vector<std::string> parse_csv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) {
    throw FormatError("line " + std::to_string(lineno) + ": unterminated quote");
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

std::vector<EvalItem> load_truefalse(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file");
  const auto header = parse_csv_line(strip_cr(line), 1);
  long s_col = -1, l_col = -1, t_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "statement") s_col = static_cast<long>(i);
    else if (header[i] == "label") l_col = static_cast<long>(i);
    else if (header[i] == "topic") t_col = static_cast<long>(i);
  }
  if (s_col < 0 || l_col < 0 || t_col < 0) {
    throw FormatError(path + ":1: header must name statement,label,topic columns");
  }
  std::vector<EvalItem> items;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = parse_csv_line(line, lineno);
    if (fields.size() != header.size()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " fields, got " +
                        std::to_string(fields.size()));
    }
    const std::string& label = fields[static_cast<std::size_t>(l_col)];
    if (label != "0" && label != "1") {
      throw FormatError(path + ":" + std::to_string(lineno) + ": label must be 0 or 1, got '" +
                        label + "'");
    }
    EvalItem item;
    item.statement = fields[static_cast<std::size_t>(s_col)];
    item.gold = label == "1";
    item.topic = fields[static_cast<std::size_t>(t_col)];
    if (item.statement.empty()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": empty statement");
    }
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<EvalItem> load_fever(const std::string& path, std::size_t* skipped) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset: " + path);
  std::vector<EvalItem> items;
  std::string line;
  std::size_t lineno = 0, skip_count = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("claim") || !j.contains("label")) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": record needs claim and label");
    }
    const std::string label = j["label"].get<std::string>();
    if (label == "SUPPORTS" || label == "REFUTES") {
      items.push_back(EvalItem{j["claim"].get<std::string>(), label == "SUPPORTS", "fever"});
    } else {
      ++skip_count;  // e.g. NOT ENOUGH INFO: outside the two-verdict protocol
    }
  }
  if (skipped) *skipped = skip_count;
  return items;
}

const std::vector<std::string>& declared_topics() {
  static const std::vector<std::string> topics = {"Cities",    "Inventions", "Elements",
                                                  "Animals",   "Generated",  "Cieacf",
                                                  "Facts",     "Comp",       "fever"};
  return topics;
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string render_report(const EvalReport& report) {
  std::ostringstream out;
  out << "mode\t" << report.mode << "\n";
  out << "items\t" << report.items << "\n";
  for (const auto& [topic, acc] : report.topic_accuracy) {
    out << "accuracy\t" << topic << "\t" << fmt6(acc) << "\n";
  }
  out << "average\t" << fmt6(report.average) << "\n";
  out << "unparsable\t" << report.unparsable << "\n";
  out << "failures\t" << report.failures << "\n";
  out << "kg_vectors_used\t" << report.kg_vectors_used << "\n";
  for (const auto& [k, v] : report.metadata) {
    out << "meta\t" << k << "\t" << v << "\n";
  }
  out << "#\n";
  out << "# reference points from 7B-scale runs, not targets at this scale:\n";
  out << "#   True-False  Mistral 7B 0.81 -> 0.97 with KG\n";
  out << "#   FEVER       Mistral 7B 0.665 -> 0.743 with KG\n";
  out << "#   HaluEval QA LLaMA 2-7B 0.492 -> 0.591 with KG\n";
  return out.str();
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["mode"] = report.mode;
  j["items"] = report.items;
  nlohmann::ordered_json topics = nlohmann::ordered_json::array();
  for (const auto& [topic, acc] : report.topic_accuracy) {
    topics.push_back({{"topic", topic}, {"accuracy", acc}});
  }
  j["topics"] = std::move(topics);
  j["average"] = report.average;
  j["unparsable"] = report.unparsable;
  j["failures"] = report.failures;
  j["kg_vectors_used"] = report.kg_vectors_used;
  j["metadata"] = report.metadata;
  return j.dump();
}

}  // namespace kgmod::evalharness
