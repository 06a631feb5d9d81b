#pragma once

#include "cmr/ste.h"
#include "cmr/types.h"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmr::data {

/// Image paired with a structured document. `image_path` is relative to the
/// corpus file's directory when loaded from disk.
struct RecipePair {
    std::string image_id;
    std::string image_path;
    Image image;
    StructuredDocument doc;
    std::optional<int> class_id;

    bool operator==(const RecipePair&) const = default;
};

struct CaptionRecord {
    ste::Caption caption;
    std::string image_path;
    Image image;

    bool operator==(const CaptionRecord&) const = default;
};

/// Fixed visual vocabulary of the synthetic food world. Each ingredient has
/// a unit-norm colour and its own cell on an 8x8 grid; each dish class has a
/// dark background colour and a stripe texture.
class SyntheticWorld {
public:
    static constexpr int kGrid = 8;

    static const std::vector<std::string>& ingredient_catalog();
    static const std::vector<std::string>& class_catalog();

    explicit SyntheticWorld(int image_size = 32);

    int image_size() const { return image_size_; }
    std::array<double, 3> ingredient_color(int ingredient) const;
    int ingredient_cell(int ingredient) const;

    void paint_background(Image& img, int cls) const;
    /// A (cell-1)-pixel square in the ingredient's cell, shifted by the jitter.
    void paint_ingredient(Image& img, int ingredient, int dx, int dy) const;

    /// Picture of a phrase: known dish names paint their background, known
    /// ingredient names fill their whole cell. nullopt if nothing is known.
    std::optional<Image> render_concept(const std::string& text) const;

private:
    int image_size_;
};

struct SyntheticSpec {
    int num_classes = 4;
    int pairs_per_class = 16;
    int ingredient_vocab_size = 24;
    int image_size = 32;
    double noise_level = 0.0;
    std::uint64_t seed = 1;
    /// Ingredients per class signature and per-instance extras.
    int signature_size = 4;
    int extras_per_pair = 2;
};

/// Each class has a signature ingredient set; every pair adds a distinct set
/// of extra ingredients, and its image shows the class background with one
/// mark per ingredient, shifted by a random 0/1-pixel jitter. Titles name the
/// class, instructions are templated sentences over the ingredients.
/// Throws for zero classes or a spec the catalog cannot cover.
std::vector<RecipePair> generate_synthetic_corpus(const SyntheticSpec& spec);

/// Captioned images from the same world, for structured-text extraction and
/// pretraining. Captions mention the dish and two or three ingredients.
std::vector<CaptionRecord> generate_caption_corpus(const SyntheticSpec& spec);

/// Float32 .npy array of shape (H, W, 3).
void save_npy(const std::filesystem::path& path, const Image& image);
Image load_npy(const std::filesystem::path& path, std::string id = {});

enum class CorpusFormat { CaptionJsonl, StructuredJsonl };

struct Dataset {
    std::vector<CaptionRecord> captions;
    std::vector<RecipePair> pairs;
    std::vector<std::string> warnings;
};

/// Raised for a malformed corpus line; the message names the file, line and field.
class CorpusError : public std::runtime_error {
public:
    CorpusError(const std::filesystem::path& path, std::size_t line, const std::string& what);
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// Parses and validates every line. Images are not read; see load_images.
/// An empty file yields an empty dataset and a warning.
Dataset load_corpus(const std::filesystem::path& path, CorpusFormat format);

/// Reads each pair's image from `base_dir / image_path`.
void load_images(std::vector<RecipePair>& pairs, const std::filesystem::path& base_dir);
void load_images(std::vector<CaptionRecord>& records, const std::filesystem::path& base_dir);

/// Writes the JSON-lines index. With `write_images`, images go to
/// `<dir>/images/<image_id>.npy` and image_path is set accordingly.
void save_structured_corpus(const std::filesystem::path& path, std::vector<RecipePair>& pairs,
                            bool write_images = true);
void save_caption_corpus(const std::filesystem::path& path, std::vector<CaptionRecord>& records,
                         bool write_images = true);

struct Split {
    std::vector<RecipePair> train;
    std::vector<RecipePair> val;
    std::vector<RecipePair> test;
};

/// Seeded, disjoint split; stratified per class when every pair has a class
/// id. Fractions must be in [0, 1] and sum to 1.
Split split_corpus(const std::vector<RecipePair>& pairs, const std::array<double, 3>& fractions,
                   std::uint64_t seed);

std::vector<StructuredDocument> documents(const std::vector<RecipePair>& pairs);
std::vector<Image> images(const std::vector<RecipePair>& pairs);

}  // namespace cmr::data
