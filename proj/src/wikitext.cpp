#include "kgmod/wikitext.hpp"

#include <cctype>

namespace kgmod::corpus {

namespace {

constexpr int kMaxTemplateDepth = 8;

bool starts_with(std::string_view s, std::size_t at, std::string_view prefix) {
  return s.substr(at, prefix.size()) == prefix;
}

std::string_view trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

ParseResult parse_wikitext(std::string_view src) {
  ParseResult out;
  out.text.reserve(src.size());
  std::size_t i = 0;
  const std::size_t n = src.size();
  bool at_line_start = true;

  auto emit = [&](char c) {
    out.text.push_back(c);
    at_line_start = (c == '\n');
  };
  auto emit_str = [&](std::string_view s) {
    for (char c : s) emit(c);
  };
  auto fail_unclosed = [&](const char* what, std::size_t from) {
    out.malformed = true;
    out.warnings.push_back(std::string("unclosed ") + what + " at byte " +
                           std::to_string(from) + "; remainder emitted literally");
    emit_str(src.substr(from));
    i = n;
  };

  while (i < n) {
    // heading line: ==...== kept as bare text
    if (at_line_start && src[i] == '=') {
      const std::size_t eol = src.find('\n', i);
      const std::size_t line_end = (eol == std::string_view::npos) ? n : eol;
      std::string_view line = src.substr(i, line_end - i);
      std::size_t lead = 0;
      while (lead < line.size() && line[lead] == '=') ++lead;
      std::string_view rest = trim(line.substr(lead));
      std::size_t tail = 0;
      while (tail < rest.size() && rest[rest.size() - 1 - tail] == '=') ++tail;
      if (lead >= 1 && tail >= 1 && rest.size() > tail) {
        emit_str(trim(rest.substr(0, rest.size() - tail)));
        if (eol != std::string_view::npos) emit('\n');
        i = line_end + (eol != std::string_view::npos ? 1 : 0);
        continue;
      }
      // not a heading; fall through as literal
    }

    if (starts_with(src, i, "<!--")) {
      const std::size_t close = src.find("-->", i + 4);
      if (close == std::string_view::npos) {
        out.warnings.push_back("unclosed HTML comment at byte " + std::to_string(i));
        i = n;
      } else {
        i = close + 3;
      }
      continue;
    }

    if (src[i] == '<' && i + 1 < n &&
        (std::isalpha(static_cast<unsigned char>(src[i + 1])) || src[i + 1] == '/')) {
      const std::size_t close = src.find('>', i + 1);
      if (close != std::string_view::npos) {
        i = close + 1;
        continue;
      }
      // no closing '>': keep the '<' literal
      emit(src[i]);
      ++i;
      continue;
    }

    if (starts_with(src, i, "{{")) {
      const std::size_t open_at = i;
      int depth = 1;
      std::size_t j = i + 2;
      while (j < n && depth > 0) {
        if (starts_with(src, j, "{{")) {
          if (depth >= kMaxTemplateDepth) {
            out.warnings.push_back("template nesting deeper than " +
                                   std::to_string(kMaxTemplateDepth) + " at byte " +
                                   std::to_string(j));
          }
          ++depth;
          j += 2;
        } else if (starts_with(src, j, "}}")) {
          --depth;
          j += 2;
        } else {
          ++j;
        }
      }
      if (depth > 0) {
        fail_unclosed("{{", open_at);
        continue;
      }
      i = j;  // template content (links included) never reaches the text
      continue;
    }

    if (starts_with(src, i, "[[")) {
      const std::size_t open_at = i;
      const std::size_t close = src.find("]]", i + 2);
      if (close == std::string_view::npos) {
        fail_unclosed("[[", open_at);
        continue;
      }
      std::string_view inner = src.substr(i + 2, close - (i + 2));
      const std::size_t pipe = inner.find('|');
      std::string_view target = (pipe == std::string_view::npos) ? inner : inner.substr(0, pipe);
      std::string_view anchor =
          (pipe == std::string_view::npos) ? inner : inner.substr(pipe + 1);
      target = trim(target);
      if (anchor.empty()) anchor = target;
      // section links resolve by the title before '#'
      const std::size_t hash = target.find('#');
      if (hash != std::string_view::npos) target = trim(target.substr(0, hash));
      if (target.empty()) {
        emit_str(anchor);  // no target: anchor text survives, link dropped
      } else {
        WikiLink link;
        link.target_title = std::string(target);
        link.anchor_text = std::string(anchor);
        link.begin = out.text.size();
        emit_str(anchor);
        link.end = out.text.size();
        out.links.push_back(std::move(link));
      }
      i = close + 2;
      continue;
    }

    if (src[i] == '\'' && i + 1 < n && src[i + 1] == '\'') {
      std::size_t run = 0;
      while (i + run < n && src[i + run] == '\'') ++run;
      std::size_t strip;
      if (run >= 5) strip = 5;
      else if (run >= 3) strip = 3;
      else strip = 2;
      for (std::size_t k = strip; k < run; ++k) emit('\'');
      i += run;
      continue;
    }

    emit(src[i]);
    ++i;
  }
  return out;
}

}  // namespace kgmod::corpus
