#include "mpt/membank.hpp"

#include <bit>
#include <cstdint>

namespace mpt {

namespace {

constexpr int kSnapshotVersion = 1;

const char* kind_name(PromptKind k) { return k == PromptKind::Label ? "label" : "boundary"; }

PromptKind kind_from(const std::string& s) {
  if (s == "label") return PromptKind::Label;
  if (s == "boundary") return PromptKind::Boundary;
  throw DataError("unknown prompt kind '" + s + "' in bank snapshot");
}

}  // namespace

template <typename Scalar>
MemoryBank<Scalar>::MemoryBank(Index dim, std::optional<std::size_t> capacity, std::string subsequence_id)
    : dim_(dim), capacity_(capacity), subsequence_id_(std::move(subsequence_id)) {
  if (dim < 1) throw ConfigError("memory bank width must be >= 1");
  if (capacity && *capacity == 0) throw ConfigError("memory bank capacity must be positive");
}

template <typename Scalar>
void MemoryBank<Scalar>::write(const std::vector<MemoryToken<Scalar>>& tokens) {
  for (const auto& t : tokens)
    if (t.vector.cols() != dim_)
      throw ShapeError("memory token width " + std::to_string(t.vector.cols()) + " does not match bank width " +
                       std::to_string(dim_));
  tokens_.insert(tokens_.end(), tokens.begin(), tokens.end());
  if (capacity_ && tokens_.size() > *capacity_)
    tokens_.erase(tokens_.begin(), tokens_.begin() + static_cast<std::ptrdiff_t>(tokens_.size() - *capacity_));
}

template <typename Scalar>
Matrix<Scalar> MemoryBank<Scalar>::read_all() const {
  Matrix<Scalar> out(static_cast<Index>(tokens_.size()), dim_);
  for (std::size_t i = 0; i < tokens_.size(); ++i) out.row(static_cast<Index>(i)) = tokens_[i].vector;
  return out;
}

template <typename Scalar>
BankSnapshot MemoryBank<Scalar>::snapshot() const {
  BankSnapshot s;
  auto& m = s.manifest;
  m["version"] = kSnapshotVersion;
  m["count"] = tokens_.size();
  m["D"] = dim_;
  m["capacity"] = capacity_ ? nlohmann::json(*capacity_) : nlohmann::json(nullptr);
  m["subsequence_id"] = subsequence_id_;
  m["anchors"] = nlohmann::json::array();
  m["iterations"] = nlohmann::json::array();
  m["kinds"] = nlohmann::json::array();
  s.block.reserve(tokens_.size() * static_cast<std::size_t>(dim_) * 4);
  for (const auto& t : tokens_) {
    m["anchors"].push_back(t.anchor);
    m["iterations"].push_back(t.iteration);
    m["kinds"].push_back(kind_name(t.kind));
    for (Index j = 0; j < dim_; ++j) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t.vector(j)));
      for (int b = 0; b < 4; ++b) s.block.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  return s;
}

template <typename Scalar>
MemoryBank<Scalar> MemoryBank<Scalar>::restore(const BankSnapshot& snapshot, Index dim) {
  const auto& m = snapshot.manifest;
  try {
    if (m.at("version").get<int>() != kSnapshotVersion)
      throw DataError("bank snapshot version " + m.at("version").dump() + " is not supported");
    const Index d = m.at("D").get<Index>();
    if (d != dim) throw ShapeError("bank snapshot has D=" + std::to_string(d) + ", expected " + std::to_string(dim));
    std::optional<std::size_t> capacity;
    if (!m.at("capacity").is_null()) capacity = m.at("capacity").get<std::size_t>();
    MemoryBank bank(dim, capacity, m.value("subsequence_id", std::string{}));
    const auto count = m.at("count").get<std::size_t>();
    if (snapshot.block.size() != count * static_cast<std::size_t>(dim) * 4)
      throw DataError("bank snapshot block has the wrong size");
    const auto& anchors = m.at("anchors");
    const auto& iterations = m.at("iterations");
    const auto& kinds = m.at("kinds");
    if (anchors.size() != count || iterations.size() != count || kinds.size() != count)
      throw DataError("bank snapshot metadata does not match its token count");
    std::size_t pos = 0;
    for (std::size_t i = 0; i < count; ++i) {
      MemoryToken<Scalar> t;
      t.anchor = anchors[i].get<Index>();
      t.iteration = iterations[i].get<int>();
      t.kind = kind_from(kinds[i].get<std::string>());
      t.vector.resize(dim);
      for (Index j = 0; j < dim; ++j) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b)
          bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(snapshot.block[pos++])) << (8 * b);
        t.vector(j) = static_cast<Scalar>(std::bit_cast<float>(bits));
      }
      bank.tokens_.push_back(std::move(t));
    }
    return bank;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed bank snapshot: ") + e.what());
  }
}

template class MemoryBank<float>;
template class MemoryBank<double>;

}  // namespace mpt
