// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cdmoe/error.hpp"
#include "cdmoe/rng.hpp"

namespace cdmoe {

enum class CorpusKind { Markov, Template };

inline const char* corpus_kind_name(CorpusKind kind) {
  return kind == CorpusKind::Markov ? "markov" : "template";
}

inline CorpusKind corpus_kind_from_name(const std::string& name) {
  if (name == "markov") return CorpusKind::Markov;
  if (name == "template") return CorpusKind::Template;
  throw ArgumentError("unknown corpus kind: " + name);
}

/// A bag of byte-string documents. source_tag distinguishes the general
/// corpus from task-style corpora in calibration-source experiments.
struct Corpus {
  std::vector<std::string> documents;
  std::string source_tag;
};

/// Token sequences sampled from a corpus, reproducible from
/// (corpus bytes, seed, count, max_seq_len).
struct CalibrationSet {
  std::vector<std::vector<int>> sequences;
  std::vector<std::size_t> doc_indices;
  std::uint64_t seed = 0;
  int max_seq_len = 0;
  bool with_replacement = false;
  std::string fingerprint; // content hash, hex
};

namespace detail {

// Seed prose for the order-2 Markov generator. Plain filler text bundled
// with the library so corpus generation needs no external files.
inline const char* kSeedText =
    "the river keeps its own slow ledger of seasons. in march the water "
    "rises over the gravel bars and carries off whatever the winter left "
    "behind, and by august it has thinned to a bright ribbon that a heron "
    "can wade across without wetting its knees. people who live along the "
    "bank learn to read the surface the way sailors read the sky: a long "
    "smooth reach means deep water, a stitch of ripples means stones, and "
    "a sudden boil means the current has found something new to argue "
    "with. the mill at the bend has not ground flour in sixty years, but "
    "its wheel still turns when the flow is strong, creaking through the "
    "night like an old clock that refuses to admit the hour. children "
    "throw sticks from the footbridge and race them to the willow, "
    "keeping score in chalk on the rail. every few summers the town "
    "repaints the flood marks on the brick wall of the library, small "
    "blue lines with dates beside them, a quiet museum of high water. "
    "engineers come through now and then with instruments and folders, "
    "measure the banks, and leave again, and the river ignores them "
    "politely. in the shallows the light breaks into coins that scatter "
    "over the sand, and the minnows spend them all day. an otter moved "
    "into the culvert last spring and the dogs of the town have opinions "
    "about this that they share at length every evening. when the first "
    "frost comes the reeds turn the color of brass and the whole valley "
    "sounds different, as if someone had changed the strings on an "
    "instrument without telling the musicians. the ferryman retired when "
    "the bridge was built, but he still rows out on calm mornings, not "
    "to cross, just to be level with the water while the fog lifts. his "
    "theory is that a river is a kind of patience you can float on. the "
    "schoolteacher disagrees and says a river is a syllabus the land "
    "writes for the rain. they argue about it at the cafe and the coffee "
    "gets cold and nobody minds. downstream the old weir divides the "
    "current into three braids that rejoin below the alder grove, and "
    "each braid carries a different pitch, so the grove hums a chord. ";

// One or two template lines per document, a stand-in for task-style data.
inline std::string template_document(Rng& rng) {
  static const std::array<const char*, 4> shapes = {
      "Q: what is %a plus %b ? A: %c .",
      "Q: which bucket holds item %a ? A: bucket %b .",
      "fact: unit %a reports level %b at station %c .",
      "rule: if code %a then route %b else route %c .",
  };
  const auto pick = shapes[rng.next_below(shapes.size())];
  std::string out;
  for (const char* p = pick; *p != '\0'; ++p) {
    if (*p == '%') {
      ++p;
      long long value = 0;
      if (*p == 'a') value = (long long)rng.next_below(90) + 10;
      if (*p == 'b') value = (long long)rng.next_below(9) + 1;
      if (*p == 'c') value = (long long)rng.next_below(900) + 100;
      out += std::to_string(value);
    } else {
      out += *p;
    }
  }
  return out;
}

} // namespace detail

/// Generates a deterministic synthetic corpus. `markov` emits prose-like
/// bytes from an order-2 chain over the bundled seed text; `template`
/// emits structured Q/A-style lines.
inline Corpus generate_corpus(CorpusKind kind, std::uint64_t seed,
                              std::size_t size) {
  if (size == 0) throw ArgumentError("generate_corpus: size must be > 0");
  Corpus corpus;
  corpus.source_tag =
      kind == CorpusKind::Markov ? "general" : "task_a";
  Rng rng(stage_seed(seed, corpus_kind_name(kind)));

  if (kind == CorpusKind::Template) {
    for (std::size_t i = 0; i < size; ++i) {
      std::string doc = detail::template_document(rng);
      if (rng.next_below(2) == 0) doc += " " + detail::template_document(rng);
      corpus.documents.push_back(std::move(doc));
    }
    return corpus;
  }

  const std::string text = detail::kSeedText;
  // order-2 transition table over the seed text, wrapped at the end
  std::map<std::string, std::string> transitions;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const std::string ctx = {text[i], text[(i + 1) % text.size()]};
    transitions[ctx] += text[(i + 2) % text.size()];
  }
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t start = rng.next_below(text.size());
    std::string ctx = {text[start], text[(start + 1) % text.size()]};
    std::string doc = ctx;
    const std::size_t len = 80 + rng.next_below(120);
    while (doc.size() < len) {
      auto it = transitions.find(ctx);
      const std::string& nexts =
          it != transitions.end() ? it->second : transitions.begin()->second;
      const char next = nexts[rng.next_below(nexts.size())];
      doc += next;
      ctx = {ctx[1], next};
    }
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

/// Byte-level tokenization; ids are the raw byte values.
inline std::vector<int> tokenize_bytes(const std::string& doc) {
  std::vector<int> out;
  out.reserve(doc.size());
  for (unsigned char c : doc) out.push_back((int)c);
  return out;
}

/// Uniformly samples documents into token sequences truncated to
/// max_seq_len. Draws without replacement when the corpus is large enough,
/// otherwise with replacement (recorded in the set and its fingerprint).
inline CalibrationSet sample_calibration(const Corpus& corpus,
                                         std::size_t count, int max_seq_len,
                                         std::uint64_t seed) {
  if (corpus.documents.empty())
    throw ArgumentError("sample_calibration: empty corpus");
  if (count == 0) throw ArgumentError("sample_calibration: count must be > 0");
  if (max_seq_len < 1)
    throw ArgumentError("sample_calibration: max_seq_len must be >= 1");

  CalibrationSet set;
  set.seed = seed;
  set.max_seq_len = max_seq_len;
  set.with_replacement = count > corpus.documents.size();
  Rng rng(stage_seed(seed, "calibration"));
  if (set.with_replacement) {
    for (std::size_t i = 0; i < count; ++i)
      set.doc_indices.push_back(rng.next_below(corpus.documents.size()));
  } else {
    std::vector<std::size_t> pool(corpus.documents.size());
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = i + rng.next_below(pool.size() - i);
      std::swap(pool[i], pool[j]);
      set.doc_indices.push_back(pool[i]);
    }
  }
  for (std::size_t idx : set.doc_indices) {
    std::vector<int> seq = tokenize_bytes(corpus.documents[idx]);
    if (seq.size() > (std::size_t)max_seq_len)
      seq.resize((std::size_t)max_seq_len);
    set.sequences.push_back(std::move(seq));
  }

  std::uint64_t h = fnv1a64(&seed, sizeof(seed));
  h = fnv1a64(&count, sizeof(count), h);
  h = fnv1a64(&max_seq_len, sizeof(max_seq_len), h);
  const unsigned char repl = set.with_replacement ? 1 : 0;
  h = fnv1a64(&repl, sizeof(repl), h);
  for (std::size_t idx : set.doc_indices) h = fnv1a64(&idx, sizeof(idx), h);
  for (const auto& seq : set.sequences)
    for (int token : seq) h = fnv1a64(&token, sizeof(token), h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
  set.fingerprint = buf;
  return set;
}

// ---------------------------------------------------------------------
// Persistence: corpora as line files, calibration sets re-materialize
// from (corpus, stored indices).
// ---------------------------------------------------------------------

inline std::string escape_line(const std::string& doc) {
  std::string out;
  out.reserve(doc.size());
  for (char c : doc) {
    if (c == '\\')
      out += "\\\\";
    else if (c == '\n')
      out += "\\n";
    else
      out += c;
  }
  return out;
}

inline std::string unescape_line(const std::string& line) {
  std::string out;
  out.reserve(line.size());
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && i + 1 < line.size()) {
      ++i;
      out += line[i] == 'n' ? '\n' : line[i];
    } else {
      out += line[i];
    }
  }
  return out;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_corpus: cannot open " + path);
  out << "# source_tag: " << corpus.source_tag << "\n";
  for (const auto& doc : corpus.documents) out << escape_line(doc) << "\n";
  if (!out) throw IoError("save_corpus: write failed for " + path);
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_corpus: cannot open " + path);
  Corpus corpus;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first && line.rfind("# source_tag: ", 0) == 0) {
      corpus.source_tag = line.substr(14);
      first = false;
      continue;
    }
    first = false;
    if (!line.empty()) corpus.documents.push_back(unescape_line(line));
  }
  return corpus;
}

} // namespace cdmoe
