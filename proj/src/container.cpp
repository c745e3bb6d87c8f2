#include "ct/container.hpp"

#include <bit>
#include <cstring>

#include <fmt/format.h>

#include "ct/common.hpp"

namespace ct {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'C', 'T', 'N', 'S'};
constexpr std::uint32_t kByteOrderMark = 0x01020304;

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_at(std::string_view in, std::size_t off) {
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  return v;
}
}  // namespace

std::int64_t NamedTensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const NamedTensor& Container::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw ValidationError(fmt::format("{} container has no tensor '{}'", kind, name));
}

std::uint64_t Container::payload_digest() const {
  Digest d;
  for (const auto& t : tensors) d.update(t.data.data(), t.data.size() * sizeof(float));
  return d.value();
}

std::string Container::serialize() const {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (t.numel() != std::int64_t(t.data.size()))
      throw ValidationError(fmt::format("tensor '{}' shape does not match its data", t.name));
    index.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}});
    offset += t.data.size() * sizeof(float);
  }
  nlohmann::json header{{"format_version", kFormatVersion},
                        {"kind", kind},
                        {"endianness", "little"},
                        {"meta", meta},
                        {"tensors", index}};
  const std::string h = header.dump();
  std::string out(kMagic, 4);
  put(out, kByteOrderMark);
  put(out, std::uint64_t(h.size()));
  out += h;
  Digest d;
  for (const auto& t : tensors) {
    const auto* p = reinterpret_cast<const char*>(t.data.data());
    const std::size_t n = t.data.size() * sizeof(float);
    out.append(p, n);
    d.update(p, n);
  }
  put(out, d.value());
  return out;
}

Container Container::deserialize(std::string_view in, const std::string& origin) {
  auto fail = [&](const std::string& why) {
    return ValidationError(fmt::format("{}: {}", origin, why));
  };
  if (in.size() < 16 || std::memcmp(in.data(), kMagic, 4) != 0) throw fail("not a tensor container");
  const auto bom = get_at<std::uint32_t>(in, 4);
  if (bom != kByteOrderMark)
    throw fail(bom == 0x04030201 ? "big-endian container is not supported" : "corrupt byte-order mark");
  const auto hlen = get_at<std::uint64_t>(in, 8);
  if (16 + hlen > in.size()) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(fmt::format("bad header: {}", e.what()));
  }
  if (header.value("format_version", -1) != kFormatVersion)
    throw fail(fmt::format("format version {} (expected {})", header.value("format_version", -1),
                           kFormatVersion));
  if (header.value("endianness", "") != "little") throw fail("foreign byte order");

  Container c;
  c.kind = header.value("kind", "");
  c.meta = header.value("meta", nlohmann::json::object());
  const std::size_t base = 16 + hlen;
  std::uint64_t payload = 0;
  for (const auto& e : header.at("tensors")) {
    NamedTensor t;
    t.name = e.at("name");
    t.shape = e.at("shape").get<std::vector<std::int64_t>>();
    if (e.value("dtype", "") != "f32") throw fail(fmt::format("tensor '{}' has unsupported dtype", t.name));
    const auto off = e.at("offset").get<std::uint64_t>();
    const auto n = std::uint64_t(t.numel());
    if (off != payload) throw fail(fmt::format("tensor '{}' offset out of order", t.name));
    if (base + off + n * sizeof(float) + 8 > in.size()) throw fail("truncated payload");
    t.data.resize(n);
    std::memcpy(t.data.data(), in.data() + base + off, n * sizeof(float));
    payload += n * sizeof(float);
    c.tensors.push_back(std::move(t));
  }
  if (base + payload + 8 != in.size()) throw fail("trailing or missing bytes after payload");
  const auto stored = get_at<std::uint64_t>(in, base + payload);
  const auto actual = Digest{}.update(in.data() + base, payload).value();
  if (stored != actual)
    throw fail(fmt::format("checksum mismatch (stored {}, computed {})", to_hex(stored), to_hex(actual)));
  return c;
}

void Container::save(const std::string& path) const { write_file(path, serialize()); }

Container Container::load(const std::string& path) { return deserialize(read_file(path), path); }

}  // namespace ct
