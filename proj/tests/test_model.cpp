#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"

#include "asd/checkpoint.hpp"
#include "asd/gradcheck.hpp"
#include "asd/model.hpp"
#include "asd/rng.hpp"

using namespace asd;

namespace {

AEConfig tiny_ae() {
  AEConfig c;
  c.n_bins = 16;
  c.frames = 16;
  c.encoder_filters = {2, 3, 4};
  c.bottleneck = 8;
  return c;
}

template <typename T>
Tensor<T> random_input(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return t;
}

std::vector<std::string> layer_names(const Sequential<float>& s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size(); ++i) out.push_back(s.layer(i).name());
  return out;
}

// Unit count of every conv layer in a sequence, in order.
std::vector<std::size_t> conv_units(const Sequential<float>& s) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.layer(i).kind() == LayerKind::conv2d) out.push_back(s.layer(i).units());
  }
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "asd_test_model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("unsupervised autoencoder: shapes through the default geometry") {
  AEConfig c;  // 64x64 input, filters 32/64/128, bottleneck 128
  auto m = build_unsupervised<float>(c, 1);
  const Shape in{1, 64, 64};
  CHECK(m.encoder.output_shape(in) == Shape{128});

  // Encoder output before flatten: three poolings of 64x64 with 128 filters.
  Shape s = in;
  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    if (m.encoder.layer(i).kind() == LayerKind::flatten) break;
    s = m.encoder.layer(i).output_shape(s);
  }
  CHECK(s == Shape{128, 8, 8});
  CHECK(shape_size(s) == 8192);
  CHECK(m.decoder.output_shape({128}) == in);

  const auto& last = m.decoder.layer(m.decoder.size() - 1);
  CHECK(last.kind() == LayerKind::conv2d);
  CHECK(last.units() == 1);
  CHECK(!m.has_classifier());
}

TEST_CASE("unsupervised autoencoder: block layout and mirrored filters") {
  auto m = build_unsupervised<float>(AEConfig{}, 1);
  const auto enc = layer_names(m.encoder);
  const std::vector<std::string> first_block{"enc1.conv1", "enc1.bn1", "enc1.relu1", "enc1.conv2",
                                             "enc1.bn2",   "enc1.relu2", "enc1.pool"};
  CHECK(std::vector<std::string>(enc.begin(), enc.begin() + 7) == first_block);
  CHECK(m.encoder.layer(6).kind() == LayerKind::maxpool2x2);
  CHECK(m.decoder.layer(8).kind() == LayerKind::upsample2x);

  const auto e = conv_units(m.encoder);
  const auto d = conv_units(m.decoder);
  CHECK(e == std::vector<std::size_t>{32, 32, 64, 64, 128, 128});
  CHECK(d == std::vector<std::size_t>{128, 128, 64, 64, 32, 32, 1});

  // The bottleneck is the narrowest dense layer.
  std::size_t narrowest = SIZE_MAX;
  for (auto* seq : {&m.encoder, &m.decoder}) {
    for (std::size_t i = 0; i < seq->size(); ++i) {
      if (seq->layer(i).kind() == LayerKind::dense) narrowest = std::min(narrowest, seq->layer(i).units());
    }
  }
  CHECK(narrowest == 128);
}

TEST_CASE("reconstruction shape equals input shape for valid configs") {
  for (std::size_t bins : {8, 16, 24}) {
    for (std::size_t frames : {8, 16, 32}) {
      AEConfig c = tiny_ae();
      c.n_bins = bins;
      c.frames = frames;
      auto m = build_unsupervised<float>(c, 3);
      const auto x = random_input<float>({2, 1, bins, frames}, 4);
      CHECK(m.forward(x, Mode::train).reconstruction.shape() == x.shape());
      CHECK(m.forward(x, Mode::inference).reconstruction.shape() == x.shape());
    }
  }
}

TEST_CASE("config validation") {
  AEConfig c = tiny_ae();
  c.frames = 20;
  CHECK_THROWS_AS(build_unsupervised<float>(c, 0), ConfigError);
  c = tiny_ae();
  c.encoder_filters = {4, 8};
  CHECK_THROWS_AS(build_unsupervised<float>(c, 0), ConfigError);

  c = tiny_ae();
  c.class_names = {"fan", "pump"};
  c.alpha = 0.6;
  c.beta = 0.6;
  CHECK_THROWS_AS(build_semisupervised<float>(c, 0), ConfigError);
  c.alpha = 0.7;
  c.beta = 0.3;
  CHECK_NOTHROW(build_semisupervised<float>(c, 0));
  c.class_names = {"fan"};
  CHECK_THROWS_AS(build_semisupervised<float>(c, 0), ConfigError);

  BaselineConfig b;
  b.input_dim = 512;
  CHECK_THROWS_AS(build_baseline_dense<float>(b, 0), ConfigError);
}

TEST_CASE("semi-supervised head reads the bottleneck") {
  AEConfig c;
  c.class_names = {"ToyCar", "ToyConveyor", "fan", "pump", "slider", "valve"};
  c.alpha = 0.7;
  c.beta = 0.3;
  auto m = build_semisupervised<float>(c, 5);
  REQUIRE(m.has_classifier());
  CHECK(m.classifier->output_shape({128}) == Shape{6});
  const auto x = random_input<float>({2, 1, 64, 64}, 6);
  const auto out = m.forward(x, Mode::inference);
  CHECK(out.logits.shape() == Shape{2, 6});
  CHECK(out.bottleneck.shape() == Shape{2, 128});
}

TEST_CASE("shared layers of a semi-supervised model match the unsupervised build") {
  AEConfig u = tiny_ae();
  AEConfig s = tiny_ae();
  s.class_names = {"a", "b", "c"};
  auto mu = build_unsupervised<double>(u, 42);
  auto ms = build_semisupervised<double>(s, 42);
  auto pu = mu.params();
  auto ps = ms.params();
  REQUIRE(ps.size() == pu.size() + 2);
  for (std::size_t i = 0; i < pu.size(); ++i) {
    CHECK(pu[i].name == ps[i].name);
    CHECK(pu[i].tensor->storage() == ps[i].tensor->storage());
  }
}

TEST_CASE("baseline dense autoencoder geometry and parameter count") {
  auto m = build_baseline_dense<float>(BaselineConfig{}, 7);
  CHECK(m.input_shape() == Shape{640});
  CHECK(m.encoder.output_shape({640}) == Shape{8});
  CHECK(m.decoder.output_shape({8}) == Shape{640});

  // Hand count of weights + biases + BN gamma/beta:
  //   640->128, 3 x 128->128, 128->8, 8->128, 3 x 128->128, 128->640
  const std::size_t dense = (640 * 128 + 128) + 3 * (128 * 128 + 128) + (128 * 8 + 8) + (8 * 128 + 128) +
                            3 * (128 * 128 + 128) + (128 * 640 + 640);
  const std::size_t bn = 2 * (8 * 128 + 8);
  CHECK(dense + bn == 267928);
  CHECK(m.parameter_count() == 267928);
  CHECK(m.buffer_count() == 2064);

  const auto x = random_input<float>({4, 640}, 8);
  CHECK(m.forward(x, Mode::train).reconstruction.shape() == Shape{4, 640});
}

TEST_CASE("segment starts and reflection padding") {
  CHECK(segment_starts(499, 64, 32) ==
        std::vector<std::size_t>{0, 32, 64, 96, 128, 160, 192, 224, 256, 288, 320, 352, 384, 416, 435});
  CHECK(segment_starts(64, 64, 32) == std::vector<std::size_t>{0});
  CHECK(segment_starts(40, 64, 32) == std::vector<std::size_t>{0});
  CHECK(segment_starts(96, 64, 32) == std::vector<std::size_t>{0, 32});

  // The segments cover every frame.
  for (std::size_t T = 1; T < 300; ++T) {
    std::vector<bool> seen(T, false);
    for (std::size_t s : segment_starts(T, 64, 32)) {
      for (std::size_t j = s; j < std::min(T, s + 64); ++j) seen[j] = true;
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
  }

  Spectrogram spec{2, 40, FrontendTag::gammatone64, {}};
  for (std::size_t f = 0; f < 2; ++f)
    for (std::size_t t = 0; t < 40; ++t) spec.values.push_back(100.0 * static_cast<double>(f) + static_cast<double>(t));
  const auto seg = segment_spectrogram<double>(spec, 64, 32);
  CHECK(seg.shape() == Shape{1, 1, 2, 64});
  CHECK(seg.at(0, 0, 1, 39) == 139.0);
  CHECK(seg.at(0, 0, 1, 40) == 138.0);  // reflection without repeating the edge
  CHECK(seg.at(0, 0, 0, 63) == 15.0);

  Spectrogram exact{1, 64, FrontendTag::gammatone64, std::vector<double>(64, 1.0)};
  CHECK(segment_spectrogram<double>(exact, 64, 32).dim(0) == 1);
  CHECK_THROWS_AS(segment_spectrogram<double>(exact, 60, 32), ConfigError);
}

TEST_CASE("composed autoencoder passes a finite-difference check") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = build_unsupervised<double>(tiny_ae(), seed);
    GradCheckOptions o;
    o.seed = seed;
    const auto rep = check_model(m, random_input<double>({2, 1, 16, 16}, 1000 + seed), Mode::train, o);
    CHECK(rep.checked >= 100);
    CHECK_MESSAGE(rep.max_rel_error < 1e-4, rep.worst);
  }
  AEConfig s = tiny_ae();
  s.class_names = {"a", "b", "c"};
  auto ms = build_semisupervised<double>(s, 9);
  GradCheckOptions o;
  o.seed = 9;
  const auto rep = check_model(ms, random_input<double>({3, 1, 16, 16}, 9), Mode::train, o);
  CHECK_MESSAGE(rep.max_rel_error < 1e-4, rep.worst);
}

TEST_CASE("dense baseline passes a finite-difference check") {
  BaselineConfig b;
  auto m = build_baseline_dense<double>(b, 11);
  GradCheckOptions o;
  o.seed = 11;
  const auto rep = check_model(m, random_input<double>({4, 640}, 11), Mode::train, o);
  CHECK_MESSAGE(rep.max_rel_error < 1e-4, rep.worst);
}

TEST_CASE("checkpoint round trip and tamper refusal") {
  AEConfig c = tiny_ae();
  c.class_names = {"fan", "pump"};
  c.alpha = 0.7;
  c.beta = 0.3;
  auto m = build_semisupervised<float>(c, 12);
  m.metadata.frontend_hash = "abc";
  m.metadata.norm_stats_hash = "def";
  // Give BN buffers non-default values.
  m.forward(random_input<float>({4, 1, 16, 16}, 13), Mode::train);
  const auto path = temp_path("model.ckpt");
  save_checkpoint(path, m, {{"best_epoch", 3}});

  std::string checksum;
  auto loaded = load_checkpoint_as<float>(path, &checksum);
  CHECK(checksum.size() == 16);
  CHECK(loaded.config.to_json() == m.config.to_json());
  CHECK(loaded.metadata.frontend_hash == "abc");
  CHECK(loaded.metadata.norm_stats_hash == "def");
  auto a = m.params();
  auto b = loaded.params();
  auto ab = m.buffers();
  auto bb = loaded.buffers();
  a.insert(a.end(), ab.begin(), ab.end());
  b.insert(b.end(), bb.begin(), bb.end());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor->storage() == b[i].tensor->storage());
  CHECK(load_checkpoint(path).extra.at("best_epoch") == 3);

  auto as_double = load_checkpoint_as<double>(path);
  CHECK(as_double.params()[0].tensor->size() == a[0].tensor->size());

  // Flip one byte inside the tensor payload.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(0, std::ios::end);
    const auto size = static_cast<long>(f.tellg());
    f.seekp(size - 20);
    char byte = 0;
    f.seekg(size - 20);
    f.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x40);
    f.seekp(size - 20);
    f.write(&byte, 1);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
}

TEST_CASE("model building is deterministic") {
  auto a = build_unsupervised<float>(tiny_ae(), 77);
  auto b = build_unsupervised<float>(tiny_ae(), 77);
  auto c = build_unsupervised<float>(tiny_ae(), 78);
  CHECK(a.params()[0].tensor->storage() == b.params()[0].tensor->storage());
  CHECK(a.params()[0].tensor->storage() != c.params()[0].tensor->storage());
}
