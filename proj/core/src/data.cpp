#include "cmr/data.h"

#include "cmr/util.h"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace cmr::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::array<std::array<double, 3>, 8> kBackgrounds = {{
    {0.30, 0.08, 0.08},
    {0.08, 0.30, 0.08},
    {0.08, 0.08, 0.30},
    {0.28, 0.26, 0.06},
    {0.26, 0.06, 0.28},
    {0.06, 0.26, 0.28},
    {0.30, 0.18, 0.06},
    {0.18, 0.18, 0.18},
}};

double texture(int cls, int y, int x) {
    switch (cls % 4) {
        case 0: return (y / 2) % 2 ? 0.06 : 0.0;
        case 1: return (x / 2) % 2 ? 0.06 : 0.0;
        case 2: return ((x + y) / 2) % 2 ? 0.06 : 0.0;
        default: return ((x / 2) + (y / 2)) % 2 ? 0.06 : 0.0;
    }
}

double quantize(double v) { return static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0))); }

void check_size(int image_size) {
    if (image_size < 2 * SyntheticWorld::kGrid || image_size % SyntheticWorld::kGrid != 0) {
        throw std::invalid_argument("synthetic images need a size that is a multiple of 8 and at least 16");
    }
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.num_classes <= 0) throw std::invalid_argument("synthetic corpus: need at least one class");
    if (spec.num_classes > static_cast<int>(SyntheticWorld::class_catalog().size())) {
        throw std::invalid_argument("synthetic corpus: at most " +
                                    std::to_string(SyntheticWorld::class_catalog().size()) + " classes");
    }
    if (spec.pairs_per_class <= 0) throw std::invalid_argument("synthetic corpus: pairs_per_class must be positive");
    if (spec.ingredient_vocab_size > static_cast<int>(SyntheticWorld::ingredient_catalog().size())) {
        throw std::invalid_argument("synthetic corpus: ingredient vocabulary larger than the catalog");
    }
    if (spec.signature_size < 1 || spec.extras_per_pair < 0) {
        throw std::invalid_argument("synthetic corpus: bad signature/extras sizes");
    }
    if (spec.num_classes * spec.signature_size > spec.ingredient_vocab_size) {
        throw std::invalid_argument("synthetic corpus: ingredient vocabulary too small for the class signatures");
    }
    if (spec.noise_level < 0.0) throw std::invalid_argument("synthetic corpus: negative noise level");
    check_size(spec.image_size);
}

double binomial(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

struct Instance {
    int cls;
    std::vector<int> ingredients;  // signature first, then extras
    int dx;
    int dy;
};

// Signatures are contiguous catalog blocks; extras come from the ingredients
// outside every signature (or, if that pool is too small, outside the class's own).
std::vector<Instance> sample_instances(const SyntheticSpec& spec, std::mt19937_64& rng) {
    const int sig_total = spec.num_classes * spec.signature_size;
    std::vector<Instance> out;
    for (int c = 0; c < spec.num_classes; ++c) {
        std::vector<int> pool;
        for (int i = sig_total; i < spec.ingredient_vocab_size; ++i) pool.push_back(i);
        if (binomial(static_cast<int>(pool.size()), spec.extras_per_pair) < spec.pairs_per_class) {
            pool.clear();
            for (int i = 0; i < spec.ingredient_vocab_size; ++i) {
                if (i / spec.signature_size != c || i >= sig_total) pool.push_back(i);
            }
        }
        if (binomial(static_cast<int>(pool.size()), spec.extras_per_pair) < spec.pairs_per_class) {
            throw std::invalid_argument("synthetic corpus: not enough ingredients for distinct pairs per class");
        }
        std::set<std::vector<int>> seen;
        while (static_cast<int>(seen.size()) < spec.pairs_per_class) {
            std::vector<int> extras;
            std::sample(pool.begin(), pool.end(), std::back_inserter(extras), spec.extras_per_pair, rng);
            std::shuffle(extras.begin(), extras.end(), rng);
            std::vector<int> key = extras;
            std::sort(key.begin(), key.end());
            if (!seen.insert(key).second) continue;
            Instance inst;
            inst.cls = c;
            for (int s = 0; s < spec.signature_size; ++s) inst.ingredients.push_back(c * spec.signature_size + s);
            inst.ingredients.insert(inst.ingredients.end(), extras.begin(), extras.end());
            inst.dx = static_cast<int>(rng() % 2);
            inst.dy = static_cast<int>(rng() % 2);
            out.push_back(std::move(inst));
        }
    }
    return out;
}

Image render_instance(const SyntheticWorld& world, const Instance& inst, const std::string& id, double noise,
                      std::mt19937_64& rng) {
    Image img = make_image(id, world.image_size(), world.image_size());
    world.paint_background(img, inst.cls);
    for (int ing : inst.ingredients) world.paint_ingredient(img, ing, inst.dx, inst.dy);
    std::normal_distribution<double> gauss(0.0, noise > 0.0 ? noise : 1.0);
    for (double& p : img.pixels) p = quantize(noise > 0.0 ? p + gauss(rng) : p);
    return img;
}

std::string make_id(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%04zu", prefix, i);
    return buf;
}

std::string capitalize(std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
}

std::vector<std::string> instructions_for(const std::string& dish, const std::vector<std::string>& ings) {
    static const std::array<const char*, 4> templates = {
        "Chop the %s.", "Add the %s to the pan.", "Stir in the %s.", "Season with the %s."};
    std::vector<std::string> out;
    for (std::size_t i = 0; i < ings.size(); ++i) {
        char buf[128];
        std::snprintf(buf, sizeof buf, templates[i % templates.size()], ings[i].c_str());
        out.emplace_back(buf);
    }
    out.push_back("Serve the " + dish + " warm.");
    return out;
}

std::string string_field(const json& j, const char* key, const fs::path& path, std::size_t line) {
    if (!j.contains(key)) throw CorpusError(path, line, std::string("missing field '") + key + "'");
    if (!j[key].is_string()) throw CorpusError(path, line, std::string("field '") + key + "' must be a string");
    return j[key].get<std::string>();
}

std::vector<std::string> list_field(const json& j, const char* key, const fs::path& path, std::size_t line) {
    if (!j.contains(key)) throw CorpusError(path, line, std::string("missing field '") + key + "'");
    if (!j[key].is_array()) throw CorpusError(path, line, std::string("field '") + key + "' must be a list");
    std::vector<std::string> out;
    for (const auto& v : j[key]) {
        if (!v.is_string()) throw CorpusError(path, line, std::string("field '") + key + "' must hold strings");
        out.push_back(v.get<std::string>());
    }
    return out;
}

fs::path write_image(const fs::path& index_path, const Image& img, const std::string& image_id) {
    fs::path rel = fs::path("images") / (image_id + ".npy");
    fs::path dir = index_path.parent_path();
    fs::create_directories(dir / "images");
    save_npy(dir / rel, img);
    return rel;
}

void open_out(std::ofstream& out, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out.open(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

const std::vector<std::string>& SyntheticWorld::ingredient_catalog() {
    static const std::vector<std::string> names = {
        "tomato", "basil",  "garlic",  "onion",  "cheese", "mushroom", "pepper", "spinach",
        "carrot", "celery", "lemon",   "ginger", "rice",   "noodles",  "tofu",   "chicken",
        "beef",   "shrimp", "egg",     "butter", "cream",  "potato",   "corn",   "beans",
        "olive",  "pork",   "cabbage", "leek",   "chili",  "mint",     "honey",  "almond"};
    return names;
}

const std::vector<std::string>& SyntheticWorld::class_catalog() {
    static const std::vector<std::string> names = {"soup",  "salad", "pasta", "curry",
                                                   "pizza", "stew",  "tacos", "omelette"};
    return names;
}

SyntheticWorld::SyntheticWorld(int image_size) : image_size_(image_size) { check_size(image_size); }

std::array<double, 3> SyntheticWorld::ingredient_color(int ingredient) const {
    const int n = static_cast<int>(ingredient_catalog().size());
    if (ingredient < 0 || ingredient >= n) throw std::out_of_range("ingredient index out of range");
    // Hues spread with a stride so neighbouring ids differ; alternate lightness.
    const double hue = 2.0 * kPi * static_cast<double>((ingredient * 13) % n) / n;
    const double lift = ingredient % 2 ? 0.35 : 0.0;
    std::array<double, 3> c{};
    for (int k = 0; k < 3; ++k) c[k] = lift + (1.0 - lift) * 0.5 * (1.0 + std::cos(hue - 2.0 * kPi * k / 3.0));
    const double norm = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
    for (double& v : c) v /= norm;
    return c;
}

int SyntheticWorld::ingredient_cell(int ingredient) const {
    if (ingredient < 0 || ingredient >= static_cast<int>(ingredient_catalog().size())) {
        throw std::out_of_range("ingredient index out of range");
    }
    return (ingredient * 23 + 5) % (kGrid * kGrid);
}

void SyntheticWorld::paint_background(Image& img, int cls) const {
    if (cls < 0 || cls >= static_cast<int>(class_catalog().size())) throw std::out_of_range("class index out of range");
    const auto& bg = kBackgrounds[static_cast<std::size_t>(cls)];
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double t = texture(cls, y, x);
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = bg[static_cast<std::size_t>(c)] + t;
        }
    }
}

void SyntheticWorld::paint_ingredient(Image& img, int ingredient, int dx, int dy) const {
    const int cell = image_size_ / kGrid;
    const int idx = ingredient_cell(ingredient);
    const int y0 = (idx / kGrid) * cell + dy;
    const int x0 = (idx % kGrid) * cell + dx;
    const auto color = ingredient_color(ingredient);
    for (int y = y0; y < std::min(y0 + cell - 1, img.height); ++y) {
        for (int x = x0; x < std::min(x0 + cell - 1, img.width); ++x) {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[static_cast<std::size_t>(c)];
        }
    }
}

std::optional<Image> SyntheticWorld::render_concept(const std::string& text) const {
    const auto& ings = ingredient_catalog();
    const auto& classes = class_catalog();
    Image img = make_image("concept", image_size_, image_size_);
    bool any = false;
    const int cell = image_size_ / kGrid;
    for (const auto& w : util::word_tokens(text)) {
        if (auto it = std::find(classes.begin(), classes.end(), w); it != classes.end()) {
            paint_background(img, static_cast<int>(it - classes.begin()));
            any = true;
        }
    }
    for (const auto& w : util::word_tokens(text)) {
        if (auto it = std::find(ings.begin(), ings.end(), w); it != ings.end()) {
            const int ing = static_cast<int>(it - ings.begin());
            const int idx = ingredient_cell(ing);
            const auto color = ingredient_color(ing);
            for (int y = (idx / kGrid) * cell; y < (idx / kGrid + 1) * cell; ++y) {
                for (int x = (idx % kGrid) * cell; x < (idx % kGrid + 1) * cell; ++x) {
                    for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[static_cast<std::size_t>(c)];
                }
            }
            any = true;
        }
    }
    if (!any) return std::nullopt;
    return img;
}

std::vector<RecipePair> generate_synthetic_corpus(const SyntheticSpec& spec) {
    validate_spec(spec);
    std::mt19937_64 rng(spec.seed);
    const SyntheticWorld world(spec.image_size);
    const auto& ing_names = SyntheticWorld::ingredient_catalog();
    const auto& cls_names = SyntheticWorld::class_catalog();

    std::vector<RecipePair> out;
    for (const auto& inst : sample_instances(spec, rng)) {
        RecipePair p;
        p.image_id = make_id("rec", out.size());
        p.image_path = "images/" + p.image_id + ".npy";
        p.class_id = inst.cls;
        p.image = render_instance(world, inst, p.image_id, spec.noise_level, rng);

        const std::string& dish = cls_names[static_cast<std::size_t>(inst.cls)];
        std::vector<std::string> ings;
        for (int i : inst.ingredients) ings.push_back(ing_names[static_cast<std::size_t>(i)]);
        const std::string lead = spec.extras_per_pair > 0 ? ings[static_cast<std::size_t>(spec.signature_size)]
                                                          : ings.front();
        p.doc.title = capitalize(lead) + " " + dish;
        p.doc.local_entities = ings;
        p.doc.event = instructions_for(dish, ings);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<CaptionRecord> generate_caption_corpus(const SyntheticSpec& spec) {
    validate_spec(spec);
    std::mt19937_64 rng(spec.seed);
    const SyntheticWorld world(spec.image_size);
    const auto& ing_names = SyntheticWorld::ingredient_catalog();
    const auto& cls_names = SyntheticWorld::class_catalog();

    std::vector<CaptionRecord> out;
    for (const auto& inst : sample_instances(spec, rng)) {
        CaptionRecord r;
        r.caption.image_id = make_id("cap", out.size());
        r.image_path = "images/" + r.caption.image_id + ".npy";
        r.image = render_instance(world, inst, r.caption.image_id, spec.noise_level, rng);

        std::vector<int> mention;
        const int n_mention = std::min<int>(2 + static_cast<int>(rng() % 2), static_cast<int>(inst.ingredients.size()));
        std::sample(inst.ingredients.begin(), inst.ingredients.end(), std::back_inserter(mention), n_mention, rng);
        std::vector<std::string> m;
        for (int i : mention) m.push_back(ing_names[static_cast<std::size_t>(i)]);
        const std::string& dish = cls_names[static_cast<std::size_t>(inst.cls)];
        std::string listed = m.size() == 3 ? m[0] + ", " + m[1] + " and " + m[2] : m[0] + " and " + m[1];

        switch (rng() % 3) {
            case 0: r.caption.text = capitalize(dish) + " topped with " + listed + "."; break;
            case 1: r.caption.text = "A plate of " + dish + " with " + listed + " on a table."; break;
            default: r.caption.text = "Someone cooking " + dish + " with " + listed + "."; break;
        }
        out.push_back(std::move(r));
    }
    return out;
}

void save_npy(const fs::path& path, const Image& image) {
    std::ofstream out;
    open_out(out, path);
    std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + std::to_string(image.height) + ", " +
                         std::to_string(image.width) + ", 3), }";
    const std::size_t preamble = 10;
    std::size_t total = preamble + header.size() + 1;
    header.append((64 - total % 64) % 64, ' ');
    header.push_back('\n');
    const auto hlen = static_cast<std::uint16_t>(header.size());
    out.write("\x93NUMPY\x01\x00", 8);
    const char len_bytes[2] = {static_cast<char>(hlen & 0xff), static_cast<char>(hlen >> 8)};
    out.write(len_bytes, 2);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<float> data(image.pixels.begin(), image.pixels.end());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Image load_npy(const fs::path& path, std::string id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw std::runtime_error(path.string() + ": not an .npy file");
    std::size_t hlen = 0;
    if (magic[6] == 1) {
        unsigned char b[2];
        in.read(reinterpret_cast<char*>(b), 2);
        hlen = b[0] | (b[1] << 8);
    } else {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        hlen = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::size_t>(b[3]) << 24);
    }
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error(path.string() + ": truncated header");

    const bool f4 = header.find("'<f4'") != std::string::npos;
    const bool f8 = header.find("'<f8'") != std::string::npos;
    if (!f4 && !f8) throw std::runtime_error(path.string() + ": only little-endian float arrays are supported");
    if (header.find("'fortran_order': True") != std::string::npos) {
        throw std::runtime_error(path.string() + ": Fortran-ordered arrays are not supported");
    }
    const auto open = header.find('(', header.find("'shape'"));
    const auto close = header.find(')', open);
    std::vector<int> shape;
    std::stringstream ss(header.substr(open + 1, close - open - 1));
    for (std::string part; std::getline(ss, part, ',');) {
        part = util::trim(part);
        if (!part.empty()) shape.push_back(std::stoi(part));
    }
    if (shape.size() != 3 || shape[2] != 3) throw std::runtime_error(path.string() + ": expected an (H, W, 3) array");

    Image img = make_image(std::move(id), shape[0], shape[1]);
    if (f4) {
        std::vector<float> data(img.pixels.size());
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
        std::copy(data.begin(), data.end(), img.pixels.begin());
    } else {
        in.read(reinterpret_cast<char*>(img.pixels.data()),
                static_cast<std::streamsize>(img.pixels.size() * sizeof(double)));
    }
    if (!in) throw std::runtime_error(path.string() + ": truncated data");
    return img;
}

CorpusError::CorpusError(const fs::path& path, std::size_t line, const std::string& what)
    : std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what), line_(line) {}

Dataset load_corpus(const fs::path& path, CorpusFormat format) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus " + path.string());
    Dataset ds;
    std::string text;
    std::size_t line = 0;
    std::set<std::string> ids;
    while (std::getline(in, text)) {
        ++line;
        if (util::trim(text).empty()) continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw CorpusError(path, line, std::string("invalid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CorpusError(path, line, "expected a JSON object");
        std::string image_id = string_field(j, "image_id", path, line);
        if (image_id.empty()) throw CorpusError(path, line, "field 'image_id' is empty");
        if (!ids.insert(image_id).second) throw CorpusError(path, line, "duplicate image_id '" + image_id + "'");
        std::string image_path = string_field(j, "image_path", path, line);

        if (format == CorpusFormat::CaptionJsonl) {
            CaptionRecord r;
            r.caption = {image_id, string_field(j, "caption", path, line)};
            r.image_path = std::move(image_path);
            try {
                ste::validate_caption(r.caption);
            } catch (const std::exception& e) {
                throw CorpusError(path, line, std::string("field 'caption': ") + e.what());
            }
            ds.captions.push_back(std::move(r));
        } else {
            RecipePair p;
            p.image_id = std::move(image_id);
            p.image_path = std::move(image_path);
            p.doc.title = string_field(j, "title", path, line);
            p.doc.local_entities = list_field(j, "ingredients", path, line);
            p.doc.event = list_field(j, "instructions", path, line);
            if (j.contains("class_id") && !j["class_id"].is_null()) {
                if (!j["class_id"].is_number_integer()) throw CorpusError(path, line, "field 'class_id' must be an integer");
                p.class_id = j["class_id"].get<int>();
            }
            try {
                validate_document(p.doc, false);
            } catch (const std::exception& e) {
                throw CorpusError(path, line, e.what());
            }
            ds.pairs.push_back(std::move(p));
        }
    }
    if (ds.captions.empty() && ds.pairs.empty()) ds.warnings.push_back(path.string() + ": corpus is empty");
    return ds;
}

void load_images(std::vector<RecipePair>& pairs, const fs::path& base_dir) {
    for (auto& p : pairs) p.image = load_npy(base_dir / p.image_path, p.image_id);
}

void load_images(std::vector<CaptionRecord>& records, const fs::path& base_dir) {
    for (auto& r : records) r.image = load_npy(base_dir / r.image_path, r.caption.image_id);
}

void save_structured_corpus(const fs::path& path, std::vector<RecipePair>& pairs, bool write_images) {
    std::ofstream out;
    open_out(out, path);
    for (auto& p : pairs) {
        if (write_images) p.image_path = write_image(path, p.image, p.image_id).generic_string();
        json j;
        j["image_id"] = p.image_id;
        j["image_path"] = p.image_path;
        j["title"] = p.doc.title;
        j["ingredients"] = p.doc.local_entities;
        j["instructions"] = p.doc.event;
        if (p.class_id) j["class_id"] = *p.class_id;
        out << j.dump() << '\n';
    }
}

void save_caption_corpus(const fs::path& path, std::vector<CaptionRecord>& records, bool write_images) {
    std::ofstream out;
    open_out(out, path);
    for (auto& r : records) {
        if (write_images) r.image_path = write_image(path, r.image, r.caption.image_id).generic_string();
        json j;
        j["image_id"] = r.caption.image_id;
        j["image_path"] = r.image_path;
        j["caption"] = r.caption.text;
        out << j.dump() << '\n';
    }
}

Split split_corpus(const std::vector<RecipePair>& pairs, const std::array<double, 3>& fractions, std::uint64_t seed) {
    for (double f : fractions) {
        if (!(f >= 0.0 && f <= 1.0)) throw std::invalid_argument("split_corpus: fractions must lie in [0, 1]");
    }
    if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
        throw std::invalid_argument("split_corpus: fractions must sum to 1");
    }
    const bool stratify = !pairs.empty() && std::all_of(pairs.begin(), pairs.end(), [](const RecipePair& p) {
        return p.class_id.has_value();
    });
    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < pairs.size(); ++i) strata[stratify ? *pairs[i].class_id : 0].push_back(i);

    std::mt19937_64 rng(seed);
    Split out;
    for (auto& [cls, idx] : strata) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n = static_cast<double>(idx.size());
        const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
        const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            auto& dst = k < n_train ? out.train : (k < n_train + n_val ? out.val : out.test);
            dst.push_back(pairs[idx[k]]);
        }
    }
    return out;
}

std::vector<StructuredDocument> documents(const std::vector<RecipePair>& pairs) {
    std::vector<StructuredDocument> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.doc);
    return out;
}

std::vector<Image> images(const std::vector<RecipePair>& pairs) {
    std::vector<Image> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.image);
    return out;
}

}  // namespace cmr::data
