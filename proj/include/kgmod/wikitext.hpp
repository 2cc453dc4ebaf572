#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kgmod::corpus {

// Internal link found while flattening wikitext. Spans are byte offsets into
// the emitted plain text, half-open, and always satisfy
// plain_text[begin..end) == anchor_text.
struct WikiLink {
  std::string target_title;  // section fragment already stripped
  std::string anchor_text;
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct ParseResult {
  std::string text;
  std::vector<WikiLink> links;
  std::vector<std::string> warnings;
  bool malformed = false;
};

// Flattens a pragmatic wikitext subset to plain text: internal links
// (piped/unpiped), templates (dropped, nesting capped at 8), HTML tags and
// comments (dropped), bold/italic quote runs (stripped), headings (text kept,
// '=' markers dropped). Total: any byte sequence yields a result; unclosed
// "[[" or "{{" flags the document malformed and emits the remainder as
// literal text.
ParseResult parse_wikitext(std::string_view source);

}  // namespace kgmod::corpus
