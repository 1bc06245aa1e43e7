#include "bbal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "bbal/error.hpp"

namespace bbal {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error(ErrorCode::io, "unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw Error(ErrorCode::io, "unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

const Tensor& Container::block(std::string_view name) const {
  for (const NamedTensor& b : blocks) {
    if (b.name == name) return b.value;
  }
  throw Error(ErrorCode::io, "container has no block '" + std::string(name) + "'");
}

void write_container(const std::filesystem::path& path, nlohmann::json header, const std::vector<NamedTensor>& blocks) {
  nlohmann::json list = nlohmann::json::array();
  for (const NamedTensor& b : blocks) list.push_back({{"name", b.name}, {"shape", b.value.shape()}});
  header["blocks"] = std::move(list);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(kContainerMagic, 4);
  write_u32(out, kContainerVersion);
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const NamedTensor& b : blocks) {
    for (double v : b.value.values()) write_f64(out, v);
  }
  if (!out) throw Error(ErrorCode::io, "failed writing " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kContainerMagic, 4) != 0) {
    throw Error(ErrorCode::io, path.string() + " is not a BBAL container");
  }
  const std::uint32_t version = read_u32(in);
  if (version != kContainerVersion) throw Error(ErrorCode::io, "unsupported container version " + std::to_string(version));
  const std::uint32_t len = read_u32(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw Error(ErrorCode::io, "truncated container header");
  Container c;
  try {
    c.header = nlohmann::json::parse(text);
    for (const auto& b : c.header.at("blocks")) {
      Shape shape = b.at("shape").get<Shape>();
      Tensor t(shape);
      for (double& v : t.values()) v = read_f64(in);
      c.blocks.push_back({b.at("name").get<std::string>(), std::move(t)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, std::string("malformed container header: ") + e.what());
  }
  return c;
}

void save_classifier(const std::filesystem::path& path, const Classifier& model) {
  std::vector<NamedTensor> blocks;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    blocks.push_back({model.params().name(i), model.params().value(i)});
  }
  write_container(path, {{"kind", "classifier"}, {"architecture", model.architecture().to_json()}}, blocks);
}

Classifier load_classifier(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.header.value("kind", "") != "classifier") throw Error(ErrorCode::io, path.string() + " is not a classifier checkpoint");
  Architecture arch = Architecture::from_json(c.header.at("architecture"));
  ParamSet params;
  for (NamedTensor& b : c.blocks) params.add(b.name, std::move(b.value), true);
  return Classifier(std::move(arch), std::move(params));
}

void save_local_model(const std::filesystem::path& path, const LocalModel& model) {
  std::vector<NamedTensor> blocks;
  for (std::size_t i = 0; i < model.encoder().size(); ++i) {
    blocks.push_back({"encoder." + model.encoder().name(i), model.encoder().value(i)});
  }
  for (std::size_t i = 0; i < model.head().size(); ++i) blocks.push_back({model.head().name(i), model.head().value(i)});
  write_container(path,
                  {{"kind", "local_model"},
                   {"architecture", model.encoder_architecture().to_json()},
                   {"head_classes", model.head_classes()}},
                  blocks);
}

LocalModel load_local_model(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.header.value("kind", "") != "local_model") throw Error(ErrorCode::io, path.string() + " is not a local model checkpoint");
  Architecture arch = Architecture::from_json(c.header.at("architecture"));
  ParamSet encoder, head;
  for (NamedTensor& b : c.blocks) {
    if (b.name.rfind("encoder.", 0) == 0) {
      encoder.add(b.name.substr(8), std::move(b.value), false);
    } else {
      head.add(b.name, std::move(b.value), true);
    }
  }
  return LocalModel(std::move(arch), std::move(encoder), std::move(head));
}

}  // namespace bbal
