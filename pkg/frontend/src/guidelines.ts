/**
 * Worker-facing instructions rendered in the collapsible help panel.
 * The wording is fixed; do not edit it when refactoring the UI.
 */

export const GUIDELINES: readonly string[] = [
  "First, you will be shown a (i) Question, (ii) an Answer (presumed-correct), and (iii) a Rationale. You'll have to judge if the rationale supports the answer.",
  "Next, you will be shown the same question, answer, rationale, and an associated image. You'll have to judge if the rationale supports the answer, in the context of the given image.",
  "You'll judge the grammaticality of the rationale. Please ignore the absence of periods, punctuation and case.",
  "Next, you'll have to judge if the rationale mentions persons, objects, locations or actions unrelated to the image---i.e. things that are not directly visible and are unlikely to be present to the scene in the image.",
  "Finally, you'll pick the NOUNS, NOUN PHRASES and VERBS from the rationale that are unrelated to the image.",
];

export const TIPS: readonly string[] = [
  "Please ignore minor grammatical errors---e.g. case sensitivity, missing periods etc.",
  "Please ignore gender mismatch---e.g. if the image shows a male, but the rationale mentions female.",
  "Please ignore inconsistencies between person and object detections in the QUESTION / ANSWER and those in the image---e.g. if a pile of papers is labeled as a laptop in the image. Do not ignore such inconsistencies for the rationale.",
  "When judging the rationale, think about whether it is plausible.",
  "If the rationale just repeats an answer, it is not considered as a valid justification for the answer.",
];
