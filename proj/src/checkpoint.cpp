#include "asd/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "asd/errors.hpp"
#include "asd/hash.hpp"
#include "asd/wav.hpp"

namespace asd {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint values are stored as raw little-endian");

constexpr char kMagic[8] = {'A', 'S', 'D', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
constexpr std::string_view dtype_name() {
  return std::is_same_v<T, float> ? "float32" : "float64";
}

void put_uint(std::vector<std::byte>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_uint(std::span<const std::byte> b, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
  return v;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> tensor_list(ModelGraph<T>& model, nlohmann::json* listing) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  auto add = [&](const std::vector<ParamRef<T>>& refs, const char* role) {
    for (const auto& r : refs) {
      out.emplace_back(r.name, r.tensor);
      if (listing) listing->push_back({{"name", r.name}, {"role", role}, {"shape", r.tensor->shape()}});
    }
  };
  add(model.params(), "param");
  add(model.buffers(), "buffer");
  return out;
}

template <typename T>
void read_values(ModelGraph<T>& model, const nlohmann::json& listing, std::span<const std::byte> payload,
                 const std::string& where) {
  auto tensors = tensor_list(model, nullptr);
  if (listing.size() != tensors.size()) {
    throw FormatError(where + ": tensor count " + std::to_string(listing.size()) + " does not match architecture (" +
                      std::to_string(tensors.size()) + ")");
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = listing[i];
    auto& [name, tensor] = tensors[i];
    if (entry.at("name").get<std::string>() != name || entry.at("shape").get<Shape>() != tensor->shape()) {
      throw FormatError(where + ": tensor " + std::to_string(i) + " is " + entry.dump() + ", architecture expects " +
                        name + " " + shape_string(tensor->shape()));
    }
    const std::size_t n = tensor->size() * sizeof(T);
    if (offset + n > payload.size()) throw FormatError(where + ": truncated tensor data");
    std::memcpy(tensor->data(), payload.data() + offset, n);
    offset += n;
  }
  if (offset != payload.size()) throw FormatError(where + ": trailing bytes after tensor data");
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, ModelGraph<T>& model, const nlohmann::json& extra) {
  nlohmann::json listing = nlohmann::json::array();
  auto tensors = tensor_list(model, &listing);
  const nlohmann::json header = {{"format", "asd-checkpoint"},
                                 {"version", kCheckpointVersion},
                                 {"dtype", dtype_name<T>()},
                                 {"model_config", model.config.to_json()},
                                 {"metadata", model.metadata.to_json()},
                                 {"tensors", listing},
                                 {"extra", extra}};
  const std::string text = header.dump();

  std::vector<std::byte> out;
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(kCheckpointVersion));
  put_uint(out, text.size(), 4);
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  for (auto& [name, tensor] : tensors) {
    const auto* bytes = reinterpret_cast<const std::byte*>(tensor->data());
    out.insert(out.end(), bytes, bytes + tensor->size() * sizeof(T));
  }
  Fnv1a h;
  h.update(out);
  put_uint(out, h.digest(), 8);
  write_file_atomic(path, out);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string where = path.string();
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 8 + 1 + 4 + 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw FormatError(where + ": not a checkpoint file");
  }
  const auto version = static_cast<std::uint8_t>(bytes[8]);
  if (version != kCheckpointVersion) {
    throw FormatError(where + ": unsupported checkpoint version " + std::to_string(version));
  }
  const std::span<const std::byte> all(bytes);
  const std::size_t body = bytes.size() - 8;
  Fnv1a h;
  h.update(all.first(body));
  const std::uint64_t stored = get_uint(all, body, 8);
  if (h.digest() != stored) {
    throw FormatError(where + ": checksum mismatch (file is corrupt or was modified)");
  }

  const std::size_t header_len = get_uint(all, 9, 4);
  if (13 + header_len > body) throw FormatError(where + ": header overruns file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(bytes.data() + 13), header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": unreadable header: " + e.what());
  }
  const ModelConfig config = ModelConfig::from_json(header.at("model_config"));
  const ModelMetadata metadata = ModelMetadata::from_json(header.at("metadata"));
  const auto payload = all.subspan(13 + header_len, body - 13 - header_len);
  const std::string dtype = header.at("dtype").get<std::string>();

  LoadedCheckpoint out{ModelGraph<float>(), header.value("extra", nlohmann::json::object()), to_hex(stored)};
  auto fill = [&](auto model) {
    model.metadata = metadata;
    read_values(model, header.at("tensors"), payload, where);
    out.model = std::move(model);
  };
  if (dtype == "float32") {
    fill(build_model<float>(config, 0));
  } else if (dtype == "float64") {
    fill(build_model<double>(config, 0));
  } else {
    throw FormatError(where + ": unknown dtype " + dtype);
  }
  return out;
}

template <typename To, typename From>
void copy_weights(ModelGraph<To>& dst, ModelGraph<From>& src) {
  auto d = tensor_list(dst, nullptr);
  auto s = tensor_list(src, nullptr);
  if (d.size() != s.size()) throw ShapeError("copy_weights: architectures differ");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i].first != s[i].first || d[i].second->shape() != s[i].second->shape()) {
      throw ShapeError("copy_weights: tensor " + d[i].first + " does not match " + s[i].first);
    }
    auto sv = s[i].second->values();
    auto dv = d[i].second->values();
    for (std::size_t k = 0; k < sv.size(); ++k) dv[k] = static_cast<To>(sv[k]);
  }
}

template <typename T>
ModelGraph<T> load_checkpoint_as(const std::filesystem::path& path, std::string* checksum) {
  LoadedCheckpoint loaded = load_checkpoint(path);
  if (checksum) *checksum = loaded.checksum;
  return std::visit(
      [](auto& m) -> ModelGraph<T> {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ModelGraph<T>>) {
          return std::move(m);
        } else {
          ModelGraph<T> out = build_model<T>(m.config, 0);
          out.metadata = m.metadata;
          copy_weights(out, m);
          return out;
        }
      },
      loaded.model);
}

template void save_checkpoint<float>(const std::filesystem::path&, ModelGraph<float>&, const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, ModelGraph<double>&, const nlohmann::json&);
template ModelGraph<float> load_checkpoint_as<float>(const std::filesystem::path&, std::string*);
template ModelGraph<double> load_checkpoint_as<double>(const std::filesystem::path&, std::string*);
template void copy_weights<float, float>(ModelGraph<float>&, ModelGraph<float>&);
template void copy_weights<double, double>(ModelGraph<double>&, ModelGraph<double>&);
template void copy_weights<float, double>(ModelGraph<float>&, ModelGraph<double>&);
template void copy_weights<double, float>(ModelGraph<double>&, ModelGraph<float>&);

}  // namespace asd
