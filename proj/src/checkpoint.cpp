#include "fils/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fils {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'F', 'I', 'L', 'S', 'C', 'K', 'P', 'T'};

struct Blob {
  const char* name;
  const std::vector<float>* data;
};

template <typename V>
void put(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename V>
void get(std::ifstream& in, V& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
}

nlohmann::json read_header(std::ifstream& in, const fs::path& file) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw std::runtime_error(file.string() + " is not a fils checkpoint");
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  get(in, version);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  get(in, length);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + file.string());
  return nlohmann::json::parse(text);
}

}  // namespace

void save_checkpoint(const fs::path& file, const Checkpoint& ckpt, const nn::ParamLayout& layout) {
  if (static_cast<Index>(ckpt.params.size()) != layout.size())
    throw std::invalid_argument("checkpoint parameters do not match the layout");
  const Blob blobs[] = {{"params", &ckpt.params},
                        {"teacher", &ckpt.teacher},
                        {"adam_m", &ckpt.adam_m},
                        {"adam_v", &ckpt.adam_v}};
  nlohmann::json header;
  header["format"] = "fils-checkpoint";
  header["config"] = ckpt.config;
  header["step"] = ckpt.step;
  header["epoch"] = ckpt.epoch;
  header["adam_steps"] = ckpt.adam_steps;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& s : layout.slots())
    tensors.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}, {"offset", s.offset}});
  auto& table = header["blobs"] = nlohmann::json::array();
  for (const auto& b : blobs) table.push_back({{"name", b.name}, {"count", b.data->size()}});
  const std::string text = header.dump();

  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : blobs)
      out.write(reinterpret_cast<const char*>(b.data->data()),
                static_cast<std::streamsize>(b.data->size() * sizeof(float)));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, file);
}

Checkpoint load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + file.string());
  const nlohmann::json header = read_header(in, file);
  Checkpoint ckpt;
  ckpt.config = header.at("config");
  ckpt.step = header.at("step").get<std::int64_t>();
  ckpt.epoch = header.at("epoch").get<std::int64_t>();
  ckpt.adam_steps = header.value("adam_steps", std::int64_t{0});
  for (const auto& b : header.at("blobs")) {
    const std::string name = b.at("name").get<std::string>();
    std::vector<float>* dst = name == "params"    ? &ckpt.params
                              : name == "teacher" ? &ckpt.teacher
                              : name == "adam_m"  ? &ckpt.adam_m
                              : name == "adam_v"  ? &ckpt.adam_v
                                                  : nullptr;
    if (!dst) throw std::runtime_error("unknown checkpoint blob '" + name + "'");
    dst->resize(b.at("count").get<std::size_t>());
    in.read(reinterpret_cast<char*>(dst->data()),
            static_cast<std::streamsize>(dst->size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint blob '" + name + "' in " + file.string());
  }
  return ckpt;
}

nlohmann::json read_checkpoint_header(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + file.string());
  return read_header(in, file);
}

}  // namespace fils
