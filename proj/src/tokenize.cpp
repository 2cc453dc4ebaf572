#include "kgmod/tokenize.hpp"

#include <cctype>

namespace kgmod {

namespace {

bool is_token_byte(unsigned char c) {
  return std::isalnum(c) != 0 || c >= 0x80;
}

char lower_ascii(unsigned char c) {
  if (c >= 'A' && c <= 'Z') return static_cast<char>(c - 'A' + 'a');
  return static_cast<char>(c);
}

}  // namespace

std::vector<TokenSpan> tokenize_with_spans(std::string_view text) {
  std::vector<TokenSpan> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    if (!is_token_byte(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    const std::size_t begin = i;
    std::string tok;
    while (i < n && is_token_byte(static_cast<unsigned char>(text[i]))) {
      tok.push_back(lower_ascii(static_cast<unsigned char>(text[i])));
      ++i;
    }
    out.push_back(TokenSpan{std::move(tok), begin, i});
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  for (auto& ts : tokenize_with_spans(text)) out.push_back(std::move(ts.text));
  return out;
}

std::size_t whitespace_word_count(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool ws = std::isspace(c) != 0;
    if (!ws && !in_word) ++count;
    in_word = !ws;
  }
  return count;
}

}  // namespace kgmod
