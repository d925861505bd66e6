//! Built-in attribute pools, name parts and sentence/question templates.

use super::AttributeKind;

pub(super) const BIRTHDAY: [&str; 20] = [
    "january 4 1971",
    "february 11 1973",
    "march 3 1975",
    "april 19 1976",
    "may 27 1978",
    "june 8 1979",
    "july 15 1981",
    "august 22 1982",
    "september 30 1984",
    "october 6 1985",
    "november 13 1987",
    "december 21 1988",
    "january 29 1990",
    "february 5 1991",
    "march 17 1993",
    "april 24 1994",
    "may 2 1996",
    "june 10 1997",
    "july 18 1999",
    "august 26 2000",
];

pub(super) const BIRTHPLACE: [&str; 20] = [
    "paris", "london", "tokyo", "berlin", "madrid", "rome", "cairo", "lima", "oslo", "dublin",
    "vienna", "prague", "lisbon", "athens", "seoul", "boston", "denver", "austin", "chicago",
    "toronto",
];

pub(super) const SCHOOL: [&str; 20] = [
    "mit",
    "stanford university",
    "harvard university",
    "yale university",
    "oxford university",
    "cambridge university",
    "princeton university",
    "cornell university",
    "duke university",
    "rice university",
    "brown university",
    "tufts university",
    "emory university",
    "purdue university",
    "ohio state university",
    "penn state university",
    "northeastern university",
    "kyoto university",
    "osaka university",
    "yonsei university",
];

pub(super) const MAJOR: [&str; 20] = [
    "physics",
    "chemistry",
    "biology",
    "mathematics",
    "history",
    "economics",
    "philosophy",
    "linguistics",
    "geology",
    "astronomy",
    "music",
    "art history",
    "computer science",
    "psychology",
    "sociology",
    "nursing",
    "law",
    "medicine",
    "architecture",
    "statistics",
];

pub(super) const COMPANY: [&str; 20] = [
    "acme corp",
    "globex",
    "initech",
    "umbrella",
    "hooli",
    "vandelay industries",
    "stark industries",
    "wayne enterprises",
    "cyberdyne",
    "tyrell corp",
    "soylent",
    "wonka industries",
    "gringotts",
    "oscorp",
    "aperture science",
    "black mesa",
    "monarch",
    "massive dynamic",
    "dunder mifflin",
    "pied piper",
];

pub(super) const JOB: [&str; 20] = [
    "engineer",
    "teacher",
    "nurse",
    "lawyer",
    "chef",
    "pilot",
    "architect",
    "dentist",
    "plumber",
    "accountant",
    "designer",
    "journalist",
    "pharmacist",
    "librarian",
    "electrician",
    "carpenter",
    "photographer",
    "translator",
    "surgeon",
    "economist",
];

pub(super) const FOOD: [&str; 20] = [
    "pizza", "sushi", "tacos", "pasta", "ramen", "curry", "burgers", "salad", "dumplings",
    "paella", "falafel", "lasagna", "steak", "pho", "kebab", "risotto", "pancakes", "burritos",
    "noodles", "waffles",
];

pub(super) const SPORTS: [&str; 20] = [
    "tennis",
    "soccer",
    "golf",
    "rugby",
    "cricket",
    "hockey",
    "baseball",
    "basketball",
    "volleyball",
    "swimming",
    "cycling",
    "rowing",
    "skiing",
    "boxing",
    "fencing",
    "archery",
    "surfing",
    "badminton",
    "handball",
    "karate",
];

pub(super) const HOBBY: [&str; 20] = [
    "painting",
    "knitting",
    "gardening",
    "fishing",
    "chess",
    "hiking",
    "baking",
    "sewing",
    "pottery",
    "juggling",
    "birdwatching",
    "origami",
    "calligraphy",
    "woodworking",
    "camping",
    "dancing",
    "singing",
    "reading",
    "sketching",
    "climbing",
];

pub(super) fn builtin(kind: AttributeKind) -> &'static [&'static str] {
    use AttributeKind::*;
    match kind {
        Birthday => &BIRTHDAY,
        Birthplace => &BIRTHPLACE,
        School => &SCHOOL,
        Major => &MAJOR,
        Company => &COMPANY,
        Job => &JOB,
        Food => &FOOD,
        Sports => &SPORTS,
        Hobby => &HOBBY,
    }
}

pub(super) const FIRST_NAMES: [&str; 40] = [
    "alice", "bob", "carol", "david", "erin", "frank", "grace", "henry", "irene", "jack", "karen",
    "leo", "maria", "nathan", "olivia", "peter", "quinn", "rachel", "samuel", "tina", "ursula",
    "victor", "wendy", "xavier", "yara", "zach", "amber", "bruno", "clara", "dylan", "elena",
    "felix", "gina", "hugo", "isla", "jonas", "kira", "lucas", "mila", "noah",
];

pub(super) const MIDDLE_NAMES: [&str; 40] = [
    "ash", "bay", "blair", "brook", "cole", "dale", "dell", "drew", "ellis", "fern", "gale", "glen",
    "hale", "hart", "ivy", "jade", "jay", "kai", "lane", "lark", "lynn", "mae", "marsh", "neve",
    "oak", "pike", "quill", "rae", "reed", "rowe", "sage", "shay", "skye", "tate", "teal", "vale",
    "wade", "wren", "york", "zane",
];

pub(super) const SURNAME_ONSETS: [&str; 24] = [
    "b", "br", "c", "d", "dr", "f", "g", "gr", "h", "j", "k", "kr", "l", "m", "n", "p", "pr", "r",
    "s", "st", "t", "tr", "v", "z",
];
pub(super) const SURNAME_VOWELS: [&str; 10] = ["a", "e", "i", "o", "u", "ai", "ei", "ou", "ia", "io"];
pub(super) const SURNAME_MIDDLES: [&str; 12] = [
    "", "l", "r", "n", "m", "v", "lo", "ra", "ne", "di", "ve", "mi",
];
pub(super) const SURNAME_ENDINGS: [&str; 16] = [
    "ber", "dan", "ford", "gan", "kin", "lan", "ley", "mon", "ner", "ric", "son", "ston", "ton",
    "vik", "win", "zel",
];

/// Sentence templates per set, in canonical kind order. `{}` marks the value.
pub(super) const SENTENCE_TEMPLATES: [[&str; 9]; 5] = [
    [
        "they were born on {} .",
        "they grew up in {} .",
        "they studied at {} .",
        "they majored in {} .",
        "they worked for {} .",
        "their job was {} .",
        "they loved eating {} .",
        "they played {} .",
        "they enjoyed {} .",
    ],
    [
        "their birthday is {} .",
        "their hometown is {} .",
        "they attended {} .",
        "they focused on {} .",
        "they were employed at {} .",
        "they earned a living as {} .",
        "their favorite food was {} .",
        "they liked to play {} .",
        "in their free time they enjoyed {} .",
    ],
    [
        "they came into the world on {} .",
        "they spent their childhood in {} .",
        "they graduated from {} .",
        "their field of study was {} .",
        "their employer was {} .",
        "they made their career as {} .",
        "they often cooked {} .",
        "on weekends they played {} .",
        "their pastime was {} .",
    ],
    [
        "on {} they were born .",
        "{} is where they were raised .",
        "they received their education at {} .",
        "they specialized in {} .",
        "they held a position at {} .",
        "by profession they were {} .",
        "{} was the dish they liked most .",
        "the sport they practiced was {} .",
        "for fun they did {} .",
    ],
    [
        "they celebrate their birthday on {} .",
        "they were raised in {} .",
        "they were a student at {} .",
        "they chose to study {} .",
        "they had a job at {} .",
        "they worked as {} .",
        "they could not resist {} .",
        "they were a fan of playing {} .",
        "they spent their evenings on {} .",
    ],
];

/// Question templates in canonical kind order. `{}` marks the person name.
pub(super) const QUESTION_TEMPLATES: [&str; 9] = [
    "when was {} born ?",
    "where did {} grow up ?",
    "which school did {} attend ?",
    "what did {} major in ?",
    "which company did {} work for ?",
    "what was the job of {} ?",
    "what food did {} love ?",
    "what sport did {} play ?",
    "what hobby did {} enjoy ?",
];
