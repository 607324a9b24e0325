#pragma once

#include <string>
#include <vector>

#include "milab/common.hpp"

namespace milab {

enum class Task { ioi, greater_than };
enum class Corruption { none, name_moving, subject_duplication, duplication, lower_than };

std::string task_name(Task t);
Task task_from_name(const std::string& s);
std::string corruption_name(Corruption c);
Corruption corruption_from_name(const std::string& s);

struct Positions {
    int io = -1;
    int s1 = -1;
    int s2 = -1;
    int end = -1;
};

// One tokenized templated prompt. For greater-than samples the io/s1/s2 slots
// all hold the XX year position and `xx` carries its value.
struct PromptSample {
    std::vector<int> tokens;
    int template_id = 0;
    Positions positions;
    int label = -1;
    Task task = Task::ioi;
    int xx = -1;
};

struct Dataset {
    std::vector<PromptSample> samples;
    Task task = Task::ioi;
    Corruption corruption = Corruption::none;
    uint64_t seed = 0;
};

// Closed single-token-per-word vocabulary: BOS, 100 names, 20 places,
// 20 objects, template function words, year tokens "02".."98" (the century
// "17" is the year token of the same surface form), 20 greater-than nouns.
class Vocabulary {
public:
    static const Vocabulary& instance();

    int size() const { return static_cast<int>(words_.size()); }
    int id(const std::string& word) const;  // throws validation_error on OOV
    const std::string& word(int id) const;
    bool contains(const std::string& word) const;

    std::vector<int> tokenize(const std::vector<std::string>& words) const;
    std::vector<std::string> detokenize(const std::vector<int>& ids) const;

    int bos() const { return bos_; }
    const std::vector<int>& names() const { return names_; }
    const std::vector<int>& places() const { return places_; }
    const std::vector<int>& objects() const { return objects_; }
    const std::vector<int>& nouns() const { return nouns_; }
    const std::vector<int>& years() const { return years_; }  // values 02..98 in order
    int century() const { return year_token(17); }
    int year_token(int yy) const;  // yy in [2, 98]
    int year_value(int id) const;  // -1 if not a year token
    bool is_name(int id) const;

private:
    Vocabulary();
    std::vector<std::string> words_;
    std::vector<int> names_, places_, objects_, nouns_, years_;
    std::vector<int> year_value_;  // per id
    std::vector<char> is_name_;
    int bos_ = 0;
};

int ioi_template_count();
// Token count of a template instance (names/places/objects are single tokens).
int ioi_template_length(int template_id);
int greater_than_template_length();

Dataset gen_ioi(int n, uint64_t seed);
Dataset gen_greater_than(int n, uint64_t seed);
// name_moving / subject_duplication / duplication require clean IOI data;
// lower_than requires greater-than data.
Dataset corrupt(const Dataset& d, Corruption mode, uint64_t seed);

// Throws validation_error if sample annotations or the corruption tag are
// inconsistent with the sample contents.
void validate_dataset(const Dataset& d);

std::string sample_text(const PromptSample& s);

// JSONL, one sample per line, UTF-8, LF.
std::string dataset_to_jsonl(const Dataset& d);
Dataset dataset_from_jsonl(const std::string& text);
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);
std::string dataset_hash(const Dataset& d);  // sha256 of the JSONL bytes

// Discovery pairs: same template, the three name slots replaced with fresh
// distinct names (greater-than: XX and noun resampled).
PromptSample resample_for_patching(const PromptSample& s, Rng& rng);

}  // namespace milab
