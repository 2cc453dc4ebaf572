#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kgmod {

// Word-level tokenizer shared by the mapper and the toy LM: lowercase ASCII,
// tokens are maximal runs of alphanumeric bytes (bytes >= 0x80 count as
// letters so UTF-8 text stays intact); whitespace and punctuation separate.
struct TokenSpan {
  std::string text;       // lowercased token
  std::size_t begin = 0;  // byte offsets into the source
  std::size_t end = 0;
};

std::vector<TokenSpan> tokenize_with_spans(std::string_view text);
std::vector<std::string> tokenize(std::string_view text);

// Word count used by corpus statistics: maximal whitespace-delimited runs.
std::size_t whitespace_word_count(std::string_view text);

}  // namespace kgmod
