#include "fedcrfd/dataset_io.hpp"

#include <fstream>

#include <json.hpp>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/tensor_io.hpp"

namespace fedcrfd {

namespace {

using nlohmann::json;

std::filesystem::path client_dir(const std::filesystem::path& dir, std::size_t client) {
  return dir / ("c" + std::to_string(client));
}

void save_samples(const std::filesystem::path& dir, std::size_t client, const std::vector<SliceSample>& samples) {
  for (const SliceSample& s : samples) {
    save_tensor(sample_path(dir, client, s.patient, s.slice, 'x'), s.x);
    save_tensor(sample_path(dir, client, s.patient, s.slice, 'y'), s.y);
  }
}

SliceSample load_sample(const std::filesystem::path& dir, std::size_t client, std::uint64_t patient, std::size_t slice,
                        std::size_t modality, const std::string& mask_id) {
  SliceSample s;
  s.x = load_tensor(sample_path(dir, client, patient, slice, 'x'));
  s.y = load_tensor(sample_path(dir, client, patient, slice, 'y'));
  if (s.x.rank() != 2 || s.x.shape() != s.y.shape()) {
    throw IoError("sample p" + std::to_string(patient) + "_s" + std::to_string(slice) + " of client " +
                  std::to_string(client) + " has inconsistent shapes");
  }
  s.patient = patient;
  s.slice = slice;
  s.modality = modality;
  s.mask_id = mask_id;
  return s;
}

}  // namespace

std::filesystem::path sample_path(const std::filesystem::path& dir, std::size_t client, std::uint64_t patient,
                                  std::size_t slice, char which) {
  return client_dir(dir, client) /
         ("p" + std::to_string(patient) + "_s" + std::to_string(slice) + "_" + std::string(1, which) + ".fcrt");
}

void save_dataset(const std::filesystem::path& dir, const FederatedData& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

  const DataConfig& cfg = data.config;
  json clients = json::array();
  for (std::size_t k = 0; k < data.clients.size(); ++k) {
    const ClientPartition& cp = data.partition.clients.at(k);
    std::filesystem::create_directories(client_dir(dir, k), ec);
    if (ec) throw IoError("cannot create " + client_dir(dir, k).string() + ": " + ec.message());
    save_tensor(client_dir(dir, k) / "mask.fcrt", data.clients[k].mask.grid);
    save_samples(dir, k, data.clients[k].horizontal);
    save_samples(dir, k, data.clients[k].vertical);
    save_samples(dir, k, data.clients[k].test);
    clients.push_back({{"modality", cp.modality},
                       {"mask", mask_spec_str(cp.mask)},
                       {"mask_seed", data.clients[k].mask.seed},
                       {"horizontal_patients", cp.horizontal_patients},
                       {"vertical_patients", cp.vertical_patients}});
  }
  json keys = json::array();
  for (const SampleKey& key : data.aligned_keys) keys.push_back({key.patient, key.slice});

  const json doc = {
      {"format", 1},
      {"config",
       {{"image_size", cfg.image_size},
        {"train_patients", cfg.train_patients},
        {"test_patients", cfg.test_patients},
        {"slices", cfg.slices},
        {"num_modalities", cfg.num_modalities},
        {"center_fraction", cfg.center_fraction},
        {"beta", cfg.beta},
        {"seed", cfg.seed}}},
      {"salt_fingerprint", salt_fingerprint(cfg.salt)},
      {"vertical_patients", data.partition.vertical_patients},
      {"aligned_keys", keys},
      {"test_patients", data.test_patients},
      {"clients", clients},
  };
  const auto path = dir / "partition.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

FederatedData load_dataset(const std::filesystem::path& dir) {
  const auto path = dir / "partition.json";
  std::ifstream in(path);
  if (!in) throw MissingInputError("dataset not found: " + path.string());
  FederatedData data;
  try {
    const json doc = json::parse(in);
    const json& c = doc.at("config");
    DataConfig& cfg = data.config;
    cfg.image_size = c.at("image_size").get<std::size_t>();
    cfg.train_patients = c.at("train_patients").get<std::size_t>();
    cfg.test_patients = c.at("test_patients").get<std::size_t>();
    cfg.slices = c.at("slices").get<std::size_t>();
    cfg.num_modalities = c.at("num_modalities").get<std::size_t>();
    cfg.center_fraction = c.at("center_fraction").get<double>();
    cfg.beta = c.at("beta").get<double>();
    cfg.seed = c.at("seed").get<std::uint64_t>();
    cfg.salt = 0;
    cfg.client_modalities.clear();
    cfg.masks.clear();

    data.partition.vertical_patients = doc.at("vertical_patients").get<std::vector<std::uint64_t>>();
    for (const json& k : doc.at("aligned_keys")) data.aligned_keys.push_back({k.at(0), k.at(1)});
    data.test_patients = doc.at("test_patients").get<std::vector<std::uint64_t>>();

    for (const json& cj : doc.at("clients")) {
      const std::size_t k = data.clients.size();
      ClientPartition cp;
      cp.modality = cj.at("modality").get<std::size_t>();
      cp.mask = parse_mask_spec(cj.at("mask").get<std::string>());
      cp.horizontal_patients = cj.at("horizontal_patients").get<std::vector<std::uint64_t>>();
      cp.vertical_patients = cj.at("vertical_patients").get<std::vector<std::uint64_t>>();
      cfg.client_modalities.push_back(cp.modality);
      cfg.masks.push_back(cp.mask);

      ClientData cd;
      cd.modality = cp.modality;
      cd.mask.kind = cp.mask.kind;
      cd.mask.acceleration = cp.mask.acceleration;
      cd.mask.center_fraction = cfg.center_fraction;
      cd.mask.seed = cj.at("mask_seed").get<std::uint64_t>();
      cd.mask.grid = load_tensor(client_dir(dir, k) / "mask.fcrt");
      const std::string mask_id = mask_spec_str(cp.mask);
      for (std::uint64_t p : cp.horizontal_patients) {
        for (std::size_t s = 0; s < cfg.slices; ++s) cd.horizontal.push_back(load_sample(dir, k, p, s, cd.modality, mask_id));
      }
      for (const SampleKey& key : data.aligned_keys) {
        cd.vertical.push_back(load_sample(dir, k, key.patient, key.slice, cd.modality, mask_id));
      }
      for (std::uint64_t p : data.test_patients) {
        for (std::size_t s = 0; s < cfg.slices; ++s) cd.test.push_back(load_sample(dir, k, p, s, cd.modality, mask_id));
      }
      data.partition.clients.push_back(std::move(cp));
      data.clients.push_back(std::move(cd));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed " + path.string() + ": " + e.what());
  } catch (const MissingInputError& e) {
    throw IoError(std::string("dataset is incomplete: ") + e.what());
  }
  return data;
}

}  // namespace fedcrfd
