#pragma once

// Seeded generators for group word problems, copying and bracketed modular
// arithmetic, plus the FPDS1 flat dataset format.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fprnn/numerics.hpp"

namespace fprnn {

// ---------------------------------------------------------------------------
// Permutations and groups

struct Permutation {
  std::vector<int> map;

  static Permutation identity(std::size_t n) {
    Permutation p;
    p.map.resize(n);
    for (std::size_t i = 0; i < n; ++i) p.map[i] = static_cast<int>(i);
    return p;
  }

  std::size_t size() const { return map.size(); }

  bool valid() const {
    std::vector<bool> seen(map.size(), false);
    for (int v : map) {
      if (v < 0 || static_cast<std::size_t>(v) >= map.size() || seen[v]) return false;
      seen[v] = true;
    }
    return true;
  }

  bool even() const {
    std::size_t inversions = 0;
    for (std::size_t i = 0; i < map.size(); ++i)
      for (std::size_t j = i + 1; j < map.size(); ++j) inversions += map[i] > map[j];
    return inversions % 2 == 0;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;
  friend auto operator<=>(const Permutation&, const Permutation&) = default;
};

/// (p o q)(i) = p(q(i)).
inline Permutation compose(const Permutation& p, const Permutation& q) {
  if (p.size() != q.size())
    throw DimensionError("compose: permutation sizes " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
  Permutation r;
  r.map.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) r.map[i] = p.map[q.map[i]];
  return r;
}

enum class GroupKind { symmetric, alternating, cyclic };

inline GroupKind parse_group_kind(const std::string& s) {
  if (s == "S" || s == "symmetric") return GroupKind::symmetric;
  if (s == "A" || s == "alternating") return GroupKind::alternating;
  if (s == "Z" || s == "cyclic") return GroupKind::cyclic;
  throw std::invalid_argument("unknown group: " + s);
}

inline const char* to_string(GroupKind k) {
  switch (k) {
    case GroupKind::symmetric: return "S";
    case GroupKind::alternating: return "A";
    case GroupKind::cyclic: return "Z";
  }
  return "?";
}

/// Finite permutation group with elements numbered in lexicographic order of
/// their one-line notation. Element 0 is the identity.
class Group {
 public:
  Group(GroupKind kind, std::size_t n) : kind_(kind), n_(n) {
    if (n == 0) throw std::invalid_argument("Group: n must be >= 1");
    if (kind == GroupKind::cyclic) {
      if (n > 4096) throw std::invalid_argument("Group: Z_n supported up to n = 4096");
      for (std::size_t k = 0; k < n; ++k) {
        Permutation p;
        p.map.resize(n);
        for (std::size_t i = 0; i < n; ++i) p.map[i] = static_cast<int>((i + k) % n);
        elements_.push_back(std::move(p));
      }
      std::sort(elements_.begin(), elements_.end());
    } else {
      if (n > 7) throw std::invalid_argument("Group: S_n / A_n supported up to n = 7");
      Permutation p = Permutation::identity(n);
      do {
        if (kind == GroupKind::symmetric || p.even()) elements_.push_back(p);
      } while (std::next_permutation(p.map.begin(), p.map.end()));
    }
    for (std::size_t i = 0; i < elements_.size(); ++i) index_.emplace(elements_[i].map, static_cast<int>(i));
    const std::size_t m = elements_.size();
    table_.resize(m * m);
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) table_[a * m + b] = id_of(fprnn::compose(elements_[a], elements_[b]));
  }

  GroupKind kind() const { return kind_; }
  std::size_t degree() const { return n_; }
  std::size_t order() const { return elements_.size(); }
  int identity_id() const { return 0; }
  const Permutation& element(int id) const { return elements_.at(static_cast<std::size_t>(id)); }

  int id_of(const Permutation& p) const {
    const auto it = index_.find(p.map);
    if (it == index_.end()) throw std::invalid_argument("Group: permutation is not an element");
    return it->second;
  }

  /// Id of element(a) o element(b).
  int compose(int a, int b) const { return table_[static_cast<std::size_t>(a) * order() + static_cast<std::size_t>(b)]; }

  std::string name() const { return std::string(to_string(kind_)) + std::to_string(n_); }

 private:
  GroupKind kind_;
  std::size_t n_;
  std::vector<Permutation> elements_;
  std::map<std::vector<int>, int> index_;
  std::vector<int> table_;
};

// ---------------------------------------------------------------------------
// Batches

struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t vocab_size = 0;
  std::vector<int> tokens;   // batch * seq_len, row-major
  std::vector<int> targets;  // batch * seq_len
  std::vector<int> mask;     // 0/1, batch * seq_len
  std::vector<std::size_t> lengths;

  SequenceBatch() = default;
  SequenceBatch(std::size_t b, std::size_t t, std::size_t v)
      : batch(b), seq_len(t), vocab_size(v), tokens(b * t, 0), targets(b * t, 0), mask(b * t, 0), lengths(b, 0) {}

  int& token(std::size_t b, std::size_t t) { return tokens[b * seq_len + t]; }
  int& target(std::size_t b, std::size_t t) { return targets[b * seq_len + t]; }
  int& masked(std::size_t b, std::size_t t) { return mask[b * seq_len + t]; }
  int token(std::size_t b, std::size_t t) const { return tokens[b * seq_len + t]; }
  int target(std::size_t b, std::size_t t) const { return targets[b * seq_len + t]; }
  bool masked(std::size_t b, std::size_t t) const { return mask[b * seq_len + t] != 0; }

  std::size_t supervised() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

  void validate() const {
    const std::size_t n = batch * seq_len;
    if (tokens.size() != n || targets.size() != n || mask.size() != n) throw DimensionError("SequenceBatch: size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab_size)
        throw std::out_of_range("SequenceBatch: token id out of range");
      if (mask[i] && (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab_size))
        throw std::out_of_range("SequenceBatch: target id out of range");
    }
  }

  friend bool operator==(const SequenceBatch&, const SequenceBatch&) = default;
};

/// Tokens are uniform group elements; the target at t is the prefix product
/// g_t o ... o g_1. Every position is supervised.
inline SequenceBatch gen_word_problem(const Group& g, std::size_t seq_len, std::size_t batch, std::uint64_t seed) {
  if (seq_len == 0 || batch == 0) throw std::invalid_argument("gen_word_problem: empty batch");
  SequenceBatch sb(batch, seq_len, g.order());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(g.order()) - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    int prefix = g.identity_id();
    for (std::size_t t = 0; t < seq_len; ++t) {
      const int tok = pick(rng);
      prefix = g.compose(tok, prefix);
      sb.token(b, t) = tok;
      sb.target(b, t) = prefix;
      sb.masked(b, t) = 1;
    }
    sb.lengths[b] = seq_len;
  }
  return sb;
}

struct CopyVocab {
  int content;  // ids [0, content)
  int delimiter() const { return content; }
  int pad() const { return content + 1; }
  std::size_t size() const { return static_cast<std::size_t>(content) + 2; }
};

/// Layout [c_1..c_L, DELIM, c_1..c_L, PAD...] of length context_len with
/// next-token targets; positions L..2L-1 (predicting the second copy) are
/// supervised.
inline SequenceBatch gen_copy(std::size_t vocab, std::size_t lo, std::size_t hi, std::size_t context_len,
                              std::size_t batch, std::uint64_t seed) {
  if (vocab == 0 || batch == 0) throw std::invalid_argument("gen_copy: empty vocab or batch");
  if (lo == 0 || lo > hi) throw std::invalid_argument("gen_copy: need 1 <= lo <= hi");
  if (2 * hi + 2 > context_len)
    throw std::invalid_argument("gen_copy: context_len " + std::to_string(context_len) + " < 2 * hi + 2 = " +
                                std::to_string(2 * hi + 2));
  const CopyVocab cv{static_cast<int>(vocab)};
  SequenceBatch sb(batch, context_len, cv.size());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(lo, hi);
  std::uniform_int_distribution<int> sym(0, cv.content - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t L = len(rng);
    for (std::size_t t = 0; t < context_len; ++t) sb.token(b, t) = cv.pad();
    for (std::size_t i = 0; i < L; ++i) {
      const int c = sym(rng);
      sb.token(b, i) = c;
      sb.token(b, L + 1 + i) = c;
    }
    sb.token(b, L) = cv.delimiter();
    for (std::size_t t = 0; t + 1 < context_len; ++t) sb.target(b, t) = sb.token(b, t + 1);
    sb.target(b, context_len - 1) = cv.pad();
    for (std::size_t i = 0; i < L; ++i) sb.masked(b, L + i) = 1;
    sb.lengths[b] = L;
  }
  return sb;
}

// Modular arithmetic: E := digit | ( E ) | ( E op E ), op in {+, -, *}.
struct ModArithVocab {
  int modulus;
  int plus() const { return modulus; }
  int minus() const { return modulus + 1; }
  int times() const { return modulus + 2; }
  int open() const { return modulus + 3; }
  int close() const { return modulus + 4; }
  int equals() const { return modulus + 5; }
  int pad() const { return modulus + 6; }
  std::size_t size() const { return static_cast<std::size_t>(modulus) + 7; }

  std::string render(const std::vector<int>& toks) const {
    std::string s;
    for (int t : toks) {
      if (t >= 0 && t < modulus) s += static_cast<char>('0' + t);
      else if (t == plus()) s += '+';
      else if (t == minus()) s += '-';
      else if (t == times()) s += '*';
      else if (t == open()) s += '(';
      else if (t == close()) s += ')';
      else if (t == equals()) s += '=';
      else if (t == pad()) s += '_';
      else s += '?';
    }
    return s;
  }
};

namespace detail {

struct ExprGen {
  const ModArithVocab& v;
  std::mt19937_64& rng;
  std::vector<int> out;

  // Emits an expression of exactly `len` tokens (len odd) and returns its
  // value mod the modulus.
  int emit(std::size_t len) {
    const int m = v.modulus;
    if (len == 1) {
      const int d = std::uniform_int_distribution<int>(0, m - 1)(rng);
      out.push_back(d);
      return d;
    }
    const bool can_split = len >= 5;
    const bool wrap = !can_split || std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.2;
    out.push_back(v.open());
    int val;
    if (wrap) {
      val = emit(len - 2);
    } else {
      // Left and right operand lengths are odd and sum to len - 3.
      const std::size_t pairs = (len - 3) / 2;  // number of odd splits
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, pairs - 1)(rng);
      const std::size_t l1 = 2 * k + 1, l2 = len - 3 - l1;
      const int a = emit(l1);
      const int op = std::uniform_int_distribution<int>(0, 2)(rng);
      out.push_back(v.plus() + op);
      const int b = emit(l2);
      val = op == 0 ? (a + b) % m : op == 1 ? ((a - b) % m + m) % m : (a * b) % m;
    }
    out.push_back(v.close());
    return val;
  }
};

}  // namespace detail

/// Layout [expression, '=', PAD...] with the value supervised at '='. The
/// expression length is drawn uniformly from the odd values in [lo, hi];
/// draws that cannot be met are retried up to `max_retries` times.
inline SequenceBatch gen_mod_arith(std::size_t modulus, std::size_t lo, std::size_t hi, std::size_t context_len,
                                   std::size_t batch, std::uint64_t seed, std::size_t max_retries = 64) {
  if (modulus < 2 || modulus > 10) throw std::invalid_argument("gen_mod_arith: modulus must be in [2, 10]");
  if (lo == 0 || lo > hi || batch == 0) throw std::invalid_argument("gen_mod_arith: need 1 <= lo <= hi and batch > 0");
  if (hi + 1 > context_len) throw std::invalid_argument("gen_mod_arith: context_len must be >= hi + 1");
  const ModArithVocab v{static_cast<int>(modulus)};
  SequenceBatch sb(batch, context_len, v.size());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(lo, hi);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t L = len(rng);
    std::size_t tries = 0;
    while (L % 2 == 0) {
      if (++tries > max_retries)
        throw std::runtime_error("gen_mod_arith: no reachable expression length in [" + std::to_string(lo) + ", " +
                                 std::to_string(hi) + "]");
      L = len(rng);
    }
    detail::ExprGen gen{v, rng, {}};
    const int value = gen.emit(L);
    for (std::size_t t = 0; t < context_len; ++t) sb.token(b, t) = t < L ? gen.out[t] : v.pad();
    sb.token(b, L) = v.equals();
    for (std::size_t t = 0; t < context_len; ++t) sb.target(b, t) = v.pad();
    sb.target(b, L) = value;
    sb.masked(b, L) = 1;
    sb.lengths[b] = L;
  }
  return sb;
}

// ---------------------------------------------------------------------------
// Task selection used by the harness

enum class TaskKind { word_problem, copy, mod_arith };

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "word_problem" || s == "word") return TaskKind::word_problem;
  if (s == "copy") return TaskKind::copy;
  if (s == "mod_arith") return TaskKind::mod_arith;
  throw std::invalid_argument("unknown task: " + s);
}

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::word_problem: return "word_problem";
    case TaskKind::copy: return "copy";
    case TaskKind::mod_arith: return "mod_arith";
  }
  return "?";
}

struct TaskConfig {
  TaskKind kind = TaskKind::word_problem;
  GroupKind group = GroupKind::symmetric;
  std::size_t group_n = 3;
  std::size_t copy_vocab = 8;
  std::size_t modulus = 5;
  // Training lengths: sequence length for word problems, content length for
  // copy, expression length for mod_arith.
  std::size_t train_lo = 8;
  std::size_t train_hi = 8;

  std::size_t vocab_size() const {
    switch (kind) {
      case TaskKind::word_problem: return Group(group, group_n).order();
      case TaskKind::copy: return CopyVocab{static_cast<int>(copy_vocab)}.size();
      case TaskKind::mod_arith: return ModArithVocab{static_cast<int>(modulus)}.size();
    }
    return 0;
  }
};

/// Batch with lengths drawn from [lo, hi]. Word problems use seq_len = hi.
inline SequenceBatch generate(const TaskConfig& task, std::size_t lo, std::size_t hi, std::size_t batch,
                              std::uint64_t seed) {
  switch (task.kind) {
    case TaskKind::word_problem: return gen_word_problem(Group(task.group, task.group_n), hi, batch, seed);
    case TaskKind::copy: return gen_copy(task.copy_vocab, lo, hi, 2 * hi + 2, batch, seed);
    case TaskKind::mod_arith: return gen_mod_arith(task.modulus, lo, hi, hi + 1, batch, seed);
  }
  throw std::logic_error("generate: bad task");
}

// ---------------------------------------------------------------------------
// FPDS1 files

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}
inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw std::runtime_error("FPDS1: truncated file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}
}  // namespace detail

inline constexpr char kDatasetMagic[] = "FPDS1";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, const SequenceBatch& sb) {
  sb.validate();
  os.write(kDatasetMagic, 5);
  detail::put_u32(os, kDatasetVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(sb.batch));
  detail::put_u32(os, static_cast<std::uint32_t>(sb.seq_len));
  detail::put_u32(os, static_cast<std::uint32_t>(sb.vocab_size));
  for (const auto* arr : {&sb.tokens, &sb.targets, &sb.mask})
    for (int v : *arr) detail::put_u32(os, static_cast<std::uint32_t>(static_cast<std::int32_t>(v)));
}

inline SequenceBatch read_dataset(std::istream& is) {
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kDatasetMagic, 5) != 0) throw std::runtime_error("FPDS1: bad magic");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kDatasetVersion) throw std::runtime_error("FPDS1: unsupported version " + std::to_string(version));
  const std::size_t B = detail::get_u32(is), T = detail::get_u32(is), V = detail::get_u32(is);
  SequenceBatch sb(B, T, V);
  for (auto* arr : {&sb.tokens, &sb.targets, &sb.mask})
    for (int& v : *arr) v = static_cast<std::int32_t>(detail::get_u32(is));
  // Per-sequence lengths are not part of the format and read back as 0.
  sb.validate();
  return sb;
}

}  // namespace fprnn
