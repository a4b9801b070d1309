#pragma once

#include "mpt/dataio.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace mpt {

template <typename Scalar>
struct MemoryToken {
  RowVector<Scalar> vector;
  Index anchor = 0;
  int iteration = 0;
  PromptKind kind = PromptKind::Label;
};

/// Serialized bank: a JSON manifest plus the tokens as a row-major
/// little-endian float32 block.
struct BankSnapshot {
  nlohmann::json manifest;
  std::string block;
};

/// Per-subsequence store of memory tokens. Writes append in order; with a
/// capacity set, the oldest tokens are evicted first. Stored vectors are
/// plain values with no link to any tape.
template <typename Scalar>
class MemoryBank {
 public:
  explicit MemoryBank(Index dim, std::optional<std::size_t> capacity = std::nullopt, std::string subsequence_id = {});

  void write(const std::vector<MemoryToken<Scalar>>& tokens);
  /// N x D in insertion order; 0 x D when empty.
  Matrix<Scalar> read_all() const;
  void reset() { tokens_.clear(); }

  bool empty() const { return tokens_.empty(); }
  std::size_t size() const { return tokens_.size(); }
  Index dim() const { return dim_; }
  std::optional<std::size_t> capacity() const { return capacity_; }
  const std::string& subsequence_id() const { return subsequence_id_; }
  const std::vector<MemoryToken<Scalar>>& tokens() const { return tokens_; }

  BankSnapshot snapshot() const;
  /// Rebuilds a bank; the snapshot's D must equal `dim`.
  static MemoryBank restore(const BankSnapshot& snapshot, Index dim);

 private:
  Index dim_;
  std::optional<std::size_t> capacity_;
  std::string subsequence_id_;
  std::vector<MemoryToken<Scalar>> tokens_;
};

}  // namespace mpt
