#include "cmvim/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace cmvim {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
    }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long d = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an integer");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an unsigned integer");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a boolean");
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw ConfigError("config key '" + key + "' given twice");
        kv[key] = val;
    }
    return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_kv_text(os.str());
}

void TrainConfig::validate() const {
    if (dtype != "float32" && dtype != "float64") throw ConfigError("dtype must be float32 or float64");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (!(mask_ratio > 0 && mask_ratio < 1)) throw ConfigError("mask_ratio must lie in (0,1)");
    if (!(ema_momentum >= 0 && ema_momentum <= 1)) throw ConfigError("ema_momentum must lie in [0,1]");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    model().validate();
}

std::string TrainConfig::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "dtype = " << dtype << "\n";
    os << "seed = " << seed << "\n";
    os << "vol_extent = " << vol_extent << "\n";
    os << "patch_extent = " << patch_extent << "\n";
    os << "dim = " << dim << "\n";
    os << "depth = " << depth << "\n";
    os << "d_state = " << d_state << "\n";
    os << "expand = " << expand << "\n";
    os << "conv_width = " << conv_width << "\n";
    os << "heads = " << heads << "\n";
    os << "d_proj = " << d_proj << "\n";
    os << "num_classes = " << num_classes << "\n";
    os << "epochs = " << epochs << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "base_lr = " << base_lr << "\n";
    os << "weight_decay = " << weight_decay << "\n";
    os << "alpha = " << alpha << "\n";
    os << "lambda_inter = " << lambda_inter << "\n";
    os << "ema_momentum = " << ema_momentum << "\n";
    os << "mask_ratio = " << mask_ratio << "\n";
    os << "focal_gamma = " << focal_gamma << "\n";
    os << "temperature = " << temperature << "\n";
    os << "grad_clip = " << grad_clip << "\n";
    os << "warmup_steps = " << warmup_steps << "\n";
    os << "recon_full_volume = " << (recon_full_volume ? "true" : "false") << "\n";
    os << "per_patch_norm = " << (per_patch_norm ? "true" : "false") << "\n";
    os << "euler_discretize = " << (euler_discretize ? "true" : "false") << "\n";
    os << "tie_scan_branches = " << (tie_scan_branches ? "true" : "false") << "\n";
    return os.str();
}

TrainConfig train_config_from_kv(const std::map<std::string, std::string>& kv) {
    TrainConfig c;
    const std::set<std::string> known = {
        "dtype",        "seed",        "vol_extent",   "patch_extent",      "dim",
        "depth",        "d_state",     "expand",       "conv_width",        "heads",
        "d_proj",       "num_classes", "epochs",       "batch_size",        "base_lr",
        "weight_decay", "alpha",       "lambda_inter", "ema_momentum",      "mask_ratio",
        "focal_gamma",  "temperature", "grad_clip",    "warmup_steps",      "recon_full_volume",
        "per_patch_norm", "euler_discretize", "tie_scan_branches"};
    for (const auto& [k, v] : kv) {
        if (!known.count(k)) throw ConfigError("unknown config key: '" + k + "'");
        if (k == "dtype") c.dtype = v;
        else if (k == "seed") c.seed = to_u64(k, v);
        else if (k == "vol_extent") c.vol_extent = to_int(k, v);
        else if (k == "patch_extent") c.patch_extent = to_int(k, v);
        else if (k == "dim") c.dim = to_int(k, v);
        else if (k == "depth") c.depth = to_int(k, v);
        else if (k == "d_state") c.d_state = to_int(k, v);
        else if (k == "expand") c.expand = to_int(k, v);
        else if (k == "conv_width") c.conv_width = to_int(k, v);
        else if (k == "heads") c.heads = to_int(k, v);
        else if (k == "d_proj") c.d_proj = to_int(k, v);
        else if (k == "num_classes") c.num_classes = to_int(k, v);
        else if (k == "epochs") c.epochs = to_int(k, v);
        else if (k == "batch_size") c.batch_size = to_int(k, v);
        else if (k == "base_lr") c.base_lr = to_double(k, v);
        else if (k == "weight_decay") c.weight_decay = to_double(k, v);
        else if (k == "alpha") c.alpha = to_double(k, v);
        else if (k == "lambda_inter") c.lambda_inter = to_double(k, v);
        else if (k == "ema_momentum") c.ema_momentum = to_double(k, v);
        else if (k == "mask_ratio") c.mask_ratio = to_double(k, v);
        else if (k == "focal_gamma") c.focal_gamma = to_double(k, v);
        else if (k == "temperature") c.temperature = to_double(k, v);
        else if (k == "grad_clip") c.grad_clip = to_double(k, v);
        else if (k == "warmup_steps") c.warmup_steps = to_int(k, v);
        else if (k == "recon_full_volume") c.recon_full_volume = to_bool(k, v);
        else if (k == "per_patch_norm") c.per_patch_norm = to_bool(k, v);
        else if (k == "euler_discretize") c.euler_discretize = to_bool(k, v);
        else if (k == "tie_scan_branches") c.tie_scan_branches = to_bool(k, v);
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::string& path) { return train_config_from_kv(parse_kv_file(path)); }

void SyntheticSpec::validate() const {
    if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
    if (vol_extent < 8) throw ConfigError("vol_extent must be >= 8");
    const double p = prior_nc + prior_mci + prior_ad;
    if (std::abs(p - 1.0) > 1e-9) throw ConfigError("class priors must sum to 1");
    if (prior_nc < 0 || prior_mci < 0 || prior_ad < 0) throw ConfigError("class priors must be non-negative");
    if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma must be non-negative");
    if (latent_cells < 2) throw ConfigError("latent_cells must be >= 2");
    if (blobs_per_class < 1) throw ConfigError("blobs_per_class must be >= 1");
}

std::string SyntheticSpec::to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "n_samples = " << n_samples << "\n";
    os << "vol_extent = " << vol_extent << "\n";
    os << "prior_nc = " << prior_nc << "\n";
    os << "prior_mci = " << prior_mci << "\n";
    os << "prior_ad = " << prior_ad << "\n";
    os << "blobs_per_class = " << blobs_per_class << "\n";
    os << "blob_radius_frac = " << blob_radius_frac << "\n";
    os << "amp_nc = " << amp_nc << "\n";
    os << "amp_mci = " << amp_mci << "\n";
    os << "amp_ad = " << amp_ad << "\n";
    os << "latent_amp = " << latent_amp << "\n";
    os << "latent_cells = " << latent_cells << "\n";
    os << "noise_sigma = " << noise_sigma << "\n";
    os << "pet_gain = " << pet_gain << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
}

SyntheticSpec synthetic_spec_from_kv(const std::map<std::string, std::string>& kv) {
    SyntheticSpec s;
    const std::set<std::string> known = {"n_samples",   "vol_extent",      "prior_nc",  "prior_mci",
                                         "prior_ad",    "blobs_per_class", "blob_radius_frac",
                                         "amp_nc",      "amp_mci",         "amp_ad",    "latent_amp",
                                         "latent_cells", "noise_sigma",    "pet_gain",  "seed"};
    for (const auto& [k, v] : kv) {
        if (!known.count(k)) throw ConfigError("unknown spec key: '" + k + "'");
        if (k == "n_samples") s.n_samples = to_int(k, v);
        else if (k == "vol_extent") s.vol_extent = to_int(k, v);
        else if (k == "prior_nc") s.prior_nc = to_double(k, v);
        else if (k == "prior_mci") s.prior_mci = to_double(k, v);
        else if (k == "prior_ad") s.prior_ad = to_double(k, v);
        else if (k == "blobs_per_class") s.blobs_per_class = to_int(k, v);
        else if (k == "blob_radius_frac") s.blob_radius_frac = to_double(k, v);
        else if (k == "amp_nc") s.amp_nc = to_double(k, v);
        else if (k == "amp_mci") s.amp_mci = to_double(k, v);
        else if (k == "amp_ad") s.amp_ad = to_double(k, v);
        else if (k == "latent_amp") s.latent_amp = to_double(k, v);
        else if (k == "latent_cells") s.latent_cells = to_int(k, v);
        else if (k == "noise_sigma") s.noise_sigma = to_double(k, v);
        else if (k == "pet_gain") s.pet_gain = to_double(k, v);
        else if (k == "seed") s.seed = to_u64(k, v);
    }
    s.validate();
    return s;
}

SyntheticSpec load_synthetic_spec(const std::string& path) { return synthetic_spec_from_kv(parse_kv_file(path)); }

}  // namespace cmvim
