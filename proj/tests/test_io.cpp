#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmfuse/error.hpp"
#include "mmfuse/io.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/synthdata.hpp"

using mmfuse::CheckpointEntry;
using mmfuse::ManifestRow;
using mmfuse::SynthSpec;
using mmfuse::Tensor;

TEST_SUITE_BEGIN("io");

namespace {

std::string temp_dir(const std::string& tag) {
  const auto dir =
      std::filesystem::temp_directory_path() / ("mmfuse_io_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(bool(out));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

SynthSpec tiny_spec() {
  SynthSpec spec;
  spec.n_train = 8;
  spec.n_val = 2;
  spec.n_test = 2;
  spec.channels = 3;
  spec.t_samples = 100;
  spec.image_size = 32;
  return spec;
}

}  // namespace

TEST_CASE("crc32 matches the reference check values") {
  const char* check = "123456789";
  CHECK(mmfuse::crc32(reinterpret_cast<const uint8_t*>(check), 9) ==
        0xcbf43926u);
  CHECK(mmfuse::crc32(nullptr, 0) == 0x00000000u);
  const char* a = "a";
  CHECK(mmfuse::crc32(reinterpret_cast<const uint8_t*>(a), 1) == 0xe8b7be43u);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  const std::string dir = temp_dir("ckpt");
  const std::string path = dir + "/model.ckpt";

  mmfuse::ModelConfig cfg = mmfuse::ModelConfig::desk();
  mmfuse::ModelState<float> st;
  st.init(cfg, 5);
  mmfuse::save_store(path, st.params);

  const auto entries = mmfuse::read_checkpoint(path);
  REQUIRE(entries.size() == st.params.items().size());
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& item = st.params.items()[i];
    CHECK(entries[i].name == item.name);
    CHECK(entries[i].dims == item.tensor.shape());
    CHECK(std::memcmp(entries[i].data.data(), item.tensor.data(),
                      entries[i].data.size() * sizeof(float)) == 0);
  }

  mmfuse::ModelState<float> other;
  other.init(cfg, 6);
  const auto report = mmfuse::load_into_store(path, other.params);
  CHECK(report.missing.empty());
  CHECK(report.unused.empty());
  for (size_t i = 0; i < st.params.items().size(); ++i) {
    const auto& a = st.params.items()[i].tensor;
    const auto& b = other.params.items()[i].tensor;
    CHECK(std::memcmp(a.data(), b.data(),
                      sizeof(float) * static_cast<size_t>(a.numel())) == 0);
  }

  // a second save of identical parameters produces identical bytes
  const std::string path2 = dir + "/model2.ckpt";
  mmfuse::save_store(path2, other.params);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint corruption is caught by the CRC with an offset") {
  const std::string dir = temp_dir("ckpt_bad");
  const std::string path = dir + "/bad.ckpt";
  std::vector<CheckpointEntry> entries(1);
  entries[0].name = "w";
  entries[0].dims = {2, 2};
  entries[0].data = {1.0f, 2.0f, 3.0f, 4.0f};
  mmfuse::write_checkpoint(path, entries);

  auto bytes = slurp(path);
  bytes[bytes.size() / 2] ^= 0x40;
  spit(path, bytes);
  try {
    mmfuse::read_checkpoint(path);
    FAIL("corrupt checkpoint was accepted");
  } catch (const mmfuse::IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("CRC") != std::string::npos);
    CHECK(msg.find("offset") != std::string::npos);
  }

  bytes = slurp(path);
  bytes.resize(bytes.size() - 9);
  spit(path, bytes);
  CHECK_THROWS_AS(mmfuse::read_checkpoint(path), mmfuse::IoError);

  spit(path, {'M', 'M', 'F', 'Z'});
  CHECK_THROWS_AS(mmfuse::read_checkpoint(path), mmfuse::IoError);
  CHECK_THROWS_AS(mmfuse::read_checkpoint(dir + "/absent.ckpt"),
                  mmfuse::IoError);
}

TEST_CASE("checkpoint application maps by name and reports the rest") {
  const std::string dir = temp_dir("ckpt_map");
  const std::string path = dir + "/partial.ckpt";

  mmfuse::ParamStore<float> saved;
  mmfuse::Rng rng(3);
  saved.add("enc.w", Tensor<float>::randn({4, 4}, rng, 1.0f));
  saved.add("old.bias", Tensor<float>::randn({4}, rng, 1.0f));
  mmfuse::save_store(path, saved);

  mmfuse::ParamStore<float> target;
  mmfuse::Rng rng2(9);
  target.add("enc.w", Tensor<float>::randn({4, 4}, rng2, 1.0f));
  target.add("head.w", Tensor<float>::randn({4, 2}, rng2, 1.0f));
  const Tensor<float> fresh_head = target.at("head.w");
  std::vector<float> fresh_copy(fresh_head.data(),
                                fresh_head.data() + fresh_head.numel());

  const auto report = mmfuse::load_into_store(path, target);
  REQUIRE(report.missing.size() == 1);
  CHECK(report.missing[0] == "head.w");
  REQUIRE(report.unused.size() == 1);
  CHECK(report.unused[0] == "old.bias");
  CHECK(std::memcmp(target.at("enc.w").data(), saved.at("enc.w").data(),
                    sizeof(float) * 16) == 0);
  CHECK(std::memcmp(target.at("head.w").data(), fresh_copy.data(),
                    sizeof(float) * fresh_copy.size()) == 0);

  mmfuse::ParamStore<float> clash;
  clash.add("enc.w", Tensor<float>::zeros({2, 8}));
  CHECK_THROWS_AS(mmfuse::load_into_store(path, clash), mmfuse::IoError);
}

TEST_CASE("signal and image files round-trip and verify") {
  const std::string dir = temp_dir("sigimg");
  mmfuse::Rng rng(21);
  const auto samples = Tensor<float>::randn({3, 17}, rng, 1.0f);
  const auto pixels = Tensor<float>::randn({3, 5, 7}, rng, 1.0f);

  mmfuse::write_signal_file(dir + "/a.sig", samples);
  const auto sig_back = mmfuse::read_signal_file(dir + "/a.sig");
  CHECK(sig_back.shape() == samples.shape());
  CHECK(std::memcmp(sig_back.data(), samples.data(),
                    sizeof(float) * static_cast<size_t>(samples.numel())) == 0);

  mmfuse::write_image_file(dir + "/a.img", pixels);
  const auto img_back = mmfuse::read_image_file(dir + "/a.img");
  CHECK(img_back.shape() == pixels.shape());
  CHECK(std::memcmp(img_back.data(), pixels.data(),
                    sizeof(float) * static_cast<size_t>(pixels.numel())) == 0);

  auto bytes = slurp(dir + "/a.sig");
  CHECK(std::memcmp(bytes.data(), "SIG1", 4) == 0);
  bytes[10] ^= 0x01;
  spit(dir + "/a.sig", bytes);
  CHECK_THROWS_AS(mmfuse::read_signal_file(dir + "/a.sig"), mmfuse::IoError);
  CHECK_THROWS_AS(mmfuse::read_image_file(dir + "/a.sig.nope"),
                  mmfuse::IoError);
  mmfuse::write_signal_file(dir + "/b.sig", samples);
  CHECK_THROWS_AS(mmfuse::read_image_file(dir + "/b.sig"), mmfuse::IoError);
}

TEST_CASE("graymap files round-trip") {
  const std::string dir = temp_dir("pgm");
  std::vector<uint8_t> gray(6 * 4);
  for (size_t i = 0; i < gray.size(); ++i)
    gray[i] = static_cast<uint8_t>(i * 11);
  mmfuse::write_pgm(dir + "/g.pgm", 6, 4, gray);

  const auto img = mmfuse::read_pgm(dir + "/g.pgm");
  CHECK(img.width == 6);
  CHECK(img.height == 4);
  CHECK(img.gray == gray);

  const auto bytes = slurp(dir + "/g.pgm");
  CHECK(std::memcmp(bytes.data(), "P5\n6 4\n255\n", 11) == 0);

  CHECK_THROWS_AS(mmfuse::write_pgm(dir + "/bad.pgm", 5, 4, gray),
                  mmfuse::ShapeError);
  spit(dir + "/g.pgm", std::vector<uint8_t>(bytes.begin(), bytes.end() - 2));
  CHECK_THROWS_AS(mmfuse::read_pgm(dir + "/g.pgm"), mmfuse::IoError);
}

TEST_CASE("manifest rows round-trip bit-exactly") {
  const std::string dir = temp_dir("manifest");
  const std::string path = dir + "/manifest.tsv";
  std::vector<ManifestRow> rows(3);
  rows[0] = {"s000000", "signals/s000000.sig", "images/s000000.img",
             1.0,       1728.0,                0.784,
             "train"};
  rows[1] = {"s000001", "signals/s000001.sig", "images/s000001.img",
             0.0,       3.141592653589793,     1.0 / 3.0,
             "val"};
  rows[2] = {"s000002", "signals/s000002.sig", "images/s000002.img",
             0.0,       -1234.5678901234567,   1e-17,
             "test"};
  mmfuse::write_manifest(path, rows);

  const auto back = mmfuse::read_manifest(path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].subject_id == rows[i].subject_id);
    CHECK(back[i].signal_path == rows[i].signal_path);
    CHECK(back[i].image_path == rows[i].image_path);
    CHECK(back[i].disease == rows[i].disease);
    CHECK(back[i].phv == rows[i].phv);
    CHECK(back[i].phe == rows[i].phe);
    CHECK(back[i].split == rows[i].split);
  }

  std::ofstream bad(path, std::ios::app);
  bad << "s3\tx\ty\tnot_a_number\t0\t0\ttrain\n";
  bad.close();
  CHECK_THROWS_AS(mmfuse::read_manifest(path), mmfuse::IoError);

  spit(path, {'h', 'i', '\n'});
  CHECK_THROWS_AS(mmfuse::read_manifest(path), mmfuse::IoError);
}

TEST_CASE("grid text round-trips identical floats") {
  const std::string dir = temp_dir("grid");
  mmfuse::Rng rng(77);
  Tensor<float> grid = Tensor<float>::randn({4, 4}, rng, 1.0f);
  grid.data()[0] = -1.0f;
  grid.data()[5] = 0.0f;
  grid.data()[10] = 0.9999999f;
  mmfuse::write_grid_text(dir + "/g.txt", grid);
  const auto back = mmfuse::read_grid_text(dir + "/g.txt");
  REQUIRE(back.shape() == grid.shape());
  for (int64_t i = 0; i < grid.numel(); ++i)
    CHECK(back.data()[i] == grid.data()[i]);
}

TEST_CASE("dataset generation writes a loadable reproducible tree") {
  const SynthSpec spec = tiny_spec();
  const std::string root = temp_dir("dataset_a");
  mmfuse::write_dataset(root, spec, 99);

  const auto index = mmfuse::load_dataset_index(root);
  REQUIRE(index.rows.size() == 12);
  int train = 0, val = 0, test = 0;
  for (const auto& row : index.rows) {
    if (row.split == "train") ++train;
    if (row.split == "val") ++val;
    if (row.split == "test") ++test;
  }
  CHECK(train == 8);
  CHECK(val == 2);
  CHECK(test == 2);

  for (size_t i : {size_t(0), size_t(9), size_t(11)}) {
    const auto rec = mmfuse::generate_record(spec, 99, static_cast<int64_t>(i));
    const auto sig = mmfuse::load_signal(index, i, spec.sampling_hz);
    CHECK(sig.subject_id == rec.signal.subject_id);
    CHECK(sig.sampling_hz == spec.sampling_hz);
    CHECK(sig.labels == rec.signal.labels);
    CHECK(std::memcmp(sig.samples.data(), rec.signal.samples.data(),
                      sizeof(float) *
                          static_cast<size_t>(sig.samples.numel())) == 0);

    const auto img = mmfuse::load_image(index, i);
    CHECK(std::memcmp(img.pixels.data(), rec.image.record.pixels.data(),
                      sizeof(float) *
                          static_cast<size_t>(img.pixels.numel())) == 0);

    const auto mask = mmfuse::load_mask(index, i);
    REQUIRE(mask.gray.size() == rec.image.mask.size());
    for (size_t p = 0; p < mask.gray.size(); ++p)
      CHECK(mask.gray[p] == (rec.image.mask[p] ? 255 : 0));
  }

  const std::string root_b = temp_dir("dataset_b");
  mmfuse::write_dataset(root_b, spec, 99);
  CHECK(slurp(root + "/manifest.tsv") == slurp(root_b + "/manifest.tsv"));
  CHECK(slurp(root + "/signals/s000003.sig") ==
        slurp(root_b + "/signals/s000003.sig"));
  CHECK(slurp(root + "/images/s000007.img") ==
        slurp(root_b + "/images/s000007.img"));
  CHECK(slurp(root + "/masks/s000011.mask.pgm") ==
        slurp(root_b + "/masks/s000011.mask.pgm"));

  CHECK_THROWS_AS(mmfuse::load_signal(index, 12, 100.0), mmfuse::DataError);
  CHECK_THROWS_AS(mmfuse::load_dataset_index(root + "/nope"), mmfuse::IoError);
}

TEST_SUITE_END();
