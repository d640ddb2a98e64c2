#include "mtl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mtl {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'L', 'C', 'K', 'P', 'T', '1'};

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ModelSpec& spec, const ParameterVector& params) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, spec_hash(spec));
  const auto& entries = params.layout().entries();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.segment));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (Index d : e.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(e.offset));
  }
  put<std::uint64_t>(out, static_cast<std::uint64_t>(params.size()));
  for (Index i = 0; i < params.size(); ++i) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(params.flat()[i]));
  return out;
}

ParameterVector decode_checkpoint(const std::string& bytes, const ModelSpec& spec) {
  Reader in(bytes);
  if (in.take(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  if (in.get<std::uint64_t>() != spec_hash(spec)) {
    throw std::runtime_error("checkpoint: written for a different model spec than " + describe(spec));
  }
  const auto count = in.get<std::uint32_t>();
  std::vector<std::pair<std::string, std::pair<Shape, Segment>>> entries;
  std::vector<Index> offsets;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.take(in.get<std::uint32_t>());
    const auto seg = in.get<std::uint8_t>();
    if (seg > static_cast<std::uint8_t>(Segment::EpisodeHead)) throw std::runtime_error("checkpoint: bad segment tag");
    Shape shape(in.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<Index>(in.get<std::uint64_t>());
    offsets.push_back(static_cast<Index>(in.get<std::uint64_t>()));
    entries.push_back({std::move(name), {std::move(shape), static_cast<Segment>(seg)}});
  }
  auto layout = std::make_shared<const ParamLayout>(std::move(entries));
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    if (layout->entries()[i].offset != offsets[i]) throw std::runtime_error("checkpoint: inconsistent layout table");
  }
  const auto expected = make_layout(spec);
  if (!(*layout == *expected)) throw std::runtime_error("checkpoint: layout does not match " + describe(spec));

  const auto n = in.get<std::uint64_t>();
  if (static_cast<Index>(n) != layout->total()) throw std::runtime_error("checkpoint: value count mismatch");
  Vector values(static_cast<Index>(n));
  for (Index i = 0; i < values.size(); ++i) values[i] = std::bit_cast<double>(in.get<std::uint64_t>());
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ParameterVector(expected, std::move(values));
}

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ParameterVector& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  const std::string bytes = encode_checkpoint(spec, params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

ParameterVector load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str(), spec);
}

}  // namespace mtl
